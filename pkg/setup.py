import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is used at runtime
    cythonize = None

openmp = os.environ.get("COGCL_OPENMP", "1") != "0"

ext_modules = []
if cythonize is not None:
    extensions = [
        Extension(
            "cogcl.compute._ext",
            ["src/cogcl/compute/_ext.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"] + (["-fopenmp"] if openmp else []),
            extra_link_args=["-fopenmp"] if openmp else [],
            optional=True,
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
