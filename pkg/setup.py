"""Build script: compiles the optional envelope codec extension.

The extension is an accelerator only; if it is missing at runtime the
package falls back to the pure-Python codec (see miniflow.envelope).
Set MINIFLOW_NO_EXTENSION=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("MINIFLOW_NO_EXTENSION"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "miniflow.envelope._codec",
                ["src/miniflow/envelope/_codec.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
