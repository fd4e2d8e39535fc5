"""Build hook for the optional compiled kernels.

The package works without them: ``diffgraph.kernels`` falls back to numpy
when the extension is missing. Set ``DIFFGRAPH_NO_EXT=1`` to skip the build.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("DIFFGRAPH_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("diffgraph._kernels", ["src/diffgraph/_kernels.pyx"],
                       include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
