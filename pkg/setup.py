"""Build script for the optional compiled kernels.

The package is fully functional without the extension: storyalign.kernels
falls back to pure numpy implementations when storyalign._ckernels is not
importable. We therefore treat a failed extension build as non-fatal.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("STORYALIGN_SKIP_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "storyalign._ckernels",
                    ["src/storyalign/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    # -ffp-contract=off keeps float results bit-identical to
                    # the numpy fallback (no fused multiply-add contraction).
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
