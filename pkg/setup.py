"""Build hook for the optional compiled convolution kernels.

The package is pure Python plus one Cython extension for the conv hot
loops.  If Cython (or a compiler) is unavailable the build still
succeeds and the numpy fallback in trnet._kernels is used at runtime.
Set TRNET_SKIP_EXT=1 to skip the extension on purpose.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TRNET_SKIP_EXT", "") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "trnet._kernels._conv_cy",
                    ["src/trnet/_kernels/_conv_cy.pyx"],
                    extra_compile_args=["-O3", "-march=native"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
