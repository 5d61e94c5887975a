"""Build the optional compiled kernel; the package falls back to pure Python without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("PLVCSAR_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("plvcsar.qr._fnb", ["src/plvcsar/qr/_fnb.pyx"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
