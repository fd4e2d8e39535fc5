"""Expert-graph model merging: a universal graph of generative experts,
a VGAE merging planner trained by policy gradient, and a synthetic testbed
with an exact quality oracle."""

__version__ = "0.1.0"
