"""Build script for the optional compiled kernel backend.

The package is pure Python plus one Cython extension holding the hot
numerical kernels (batched MLP forward/backward, Mahalanobis scoring).
If Cython or a C compiler is unavailable the extension is skipped and
the numpy reference backend is used instead; nothing else changes.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "twinattack._kernel_c",
                ["src/twinattack/_kernel_c.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
    for ext in extensions:
        ext.optional = True  # tolerate compiler failure, fall back to numpy backend
except ImportError:
    extensions = []

setup(ext_modules=extensions)
