import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

random_lib = os.path.join(os.path.dirname(np.random.__file__), "lib")

extensions = [
    Extension(
        "pobstop._kernels._core",
        ["src/pobstop/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        library_dirs=[random_lib],
        libraries=["npyrandom", "m"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
