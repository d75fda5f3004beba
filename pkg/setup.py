import os

from setuptools import Extension, setup

# -ffast-math at compile time only lets gcc vectorise exp() through libmvec;
# the link step stays plain, so denormals are not flushed process-wide.
# CUBEATTN_PORTABLE=1 builds with -O2 and no libmvec for unusual toolchains.
if os.environ.get("CUBEATTN_PORTABLE") == "1":
    compile_args, link_args = ["-O2"], []
else:
    compile_args, link_args = ["-O3", "-ffast-math"], ["-lmvec", "-lm"]

ext_modules = []
if os.environ.get("CUBEATTN_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "cubeattn._ckernels",
                    ["src/cubeattn/_ckernels.pyx"],
                    extra_compile_args=compile_args,
                    extra_link_args=link_args,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
