import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -fno-trapping-math only drops FP-exception semantics; values are unchanged
compile_args = ["-O3", "-fno-trapping-math"]
if os.environ.get("BLOCKATTN_NATIVE", "1") == "1":
    compile_args.append("-march=native")

ext_modules = [
    Extension(
        "blockattn._kernels",
        ["src/blockattn/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(ext_modules, compiler_directives={"language_level": "3"}))
