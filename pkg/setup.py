"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a NumPy fallback
is selected at import time); building it just makes the training inner
loop faster.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "cvrlab._kernels._ckernels",
                ["src/cvrlab/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
