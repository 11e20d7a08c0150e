import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The ray-march kernels dominate runtime; everything else is plain numpy.
# A pure-python fallback ships alongside, so a failed extension build only
# costs speed (see sceneweaver/kernels/__init__.py).
extensions = [
    Extension(
        "sceneweaver.kernels._native",
        ["src/sceneweaver/kernels/_native.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
)
