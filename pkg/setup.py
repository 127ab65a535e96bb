import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("QATLAB_PURE", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "qatlab._kernels",
                    ["src/qatlab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no fast-math / contraction: results must match the numpy fallback bitwise.
                    # -fno-trapping-math only lets the branch-free selects vectorize.
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-trapping-math"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
