import numpy as np
import pytest

from diffgraph.errors import ChecksumMismatchError, IoFailureError
from diffgraph.testbed import SPEC_FILE, TestbedSpec
from diffgraph.trainer import TrainConfig
from diffgraph.workflows import (
    HELDOUT_FIRST,
    TRAIN_FIRST,
    ScalingReport,
    decode_expert,
    encode_expert,
    heldout_prompts,
    read_expert_dir,
    read_expert_file,
    reference_candidates,
    run_scaling,
    training_prompts,
    write_expert_dir,
    write_expert_file,
)


def same_source(a, b):
    return (a.id, a.kind, a.homepage_text, a.registered_at) == \
        (b.id, b.kind, b.homepage_text, b.registered_at) and a.payload.same_as(b.payload)


def test_expert_file_round_trip(testbed, tmp_path):
    for src in (testbed.ckpt_source(1, 0, 2023), testbed.peft_source(2, 1, 2025)):
        write_expert_file(tmp_path / "e.expert", src)
        assert same_source(read_expert_file(tmp_path / "e.expert"), src)
        assert encode_expert(decode_expert(encode_expert(src))) == encode_expert(src)


def test_expert_file_corruption(testbed):
    blob = bytearray(encode_expert(testbed.ckpt_source(0, 0, 2023)))
    blob[-7] ^= 0x10
    with pytest.raises(ChecksumMismatchError):
        decode_expert(bytes(blob))
    with pytest.raises(IoFailureError):
        decode_expert(b'{"id": "x"}\n' + bytes(blob))


def test_expert_dir_order_and_spec(testbed, tmp_path):
    sources = testbed.build_ecosystem()
    paths = write_expert_dir(tmp_path, sources, testbed.spec)
    assert [p.name.split("-", 1)[0] for p in paths] == [f"{i:04d}" for i in range(len(sources))]
    back = read_expert_dir(tmp_path)
    assert all(same_source(a, b) for a, b in zip(back, sources)) and len(back) == len(sources)
    assert TestbedSpec.load(tmp_path / SPEC_FILE) == testbed.spec
    with pytest.raises(IoFailureError):
        read_expert_dir(tmp_path / "missing")


def test_prompt_splits_are_disjoint(testbed):
    ref = {p.id for p in reference_candidates(testbed)}
    tr = {p.id for p in training_prompts(testbed)}
    ho = {p.id for p in heldout_prompts(testbed)}
    assert not (ref & tr) and not (ref & ho) and not (tr & ho)
    assert min(p.instance for p in training_prompts(testbed, 5)) == TRAIN_FIRST
    assert min(p.instance for p in heldout_prompts(testbed, 5)) == HELDOUT_FIRST


def test_scaling_report_properties():
    rep = ScalingReport([0], [1], ["a"], [16], True, 0.5, 0.6, 0.62, 10)
    assert rep.ordering_holds and rep.retained_fraction == pytest.approx(0.6 / 0.62)
    assert not ScalingReport([0], [1], [], [], True, 0.6, 0.6, 0.7, 1).ordering_holds


def test_scaling_short_run(testbed):
    rep = run_scaling(testbed, TrainConfig(max_steps=3, batch_size=2), n_train=8, n_eval=10)
    assert rep.old_attributes == [0, 1, 2, 3] and rep.new_attributes == [4, 5]
    assert rep.scorer_calls == [16] * len(rep.inserted) and len(rep.inserted) == 4
    assert rep.features_unchanged and rep.n_prompts == 10
    assert all(np.isfinite([rep.reward_old, rep.reward_inserted, rep.reward_retrained]))
    with pytest.raises(ValueError):
        run_scaling(testbed, n_new=0)
