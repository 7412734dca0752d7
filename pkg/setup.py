import os

import numpy as np
from setuptools import Extension, setup

# TPCSPARSE_NO_EXT=1 skips the compiled core; the numpy fallback is used at import.
ext_modules = []
if not os.environ.get("TPCSPARSE_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "tpcsparse._ckernels",
            ["src/tpcsparse/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            optional=True,
        )
    ]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
