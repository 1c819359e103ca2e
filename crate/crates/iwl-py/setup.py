"""Build the PyO3 extension with plain setuptools by shelling out to cargo.

The extension is abi3, so one build serves every CPython >= 3.9. Install
editable with `pip install -e . --no-build-isolation`.
"""

import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension

HERE = Path(__file__).resolve().parent
LIB_NAME = "iwl_py"


class CargoExtension(Extension):
    def __init__(self):
        # Sources are tracked by cargo; setuptools only needs the target name.
        super().__init__("iwl._native", sources=[])


class CargoBuild(build_ext):
    def build_extension(self, ext):
        subprocess.run(
            ["cargo", "build", "--release", "-p", "iwl-py"],
            cwd=HERE,
            check=True,
        )
        workspace_target = HERE.parent.parent / "target" / "release"
        if sys.platform == "darwin":
            built = workspace_target / f"lib{LIB_NAME}.dylib"
        elif sys.platform == "win32":
            built = workspace_target / f"{LIB_NAME}.dll"
        else:
            built = workspace_target / f"lib{LIB_NAME}.so"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, dest)


setup(
    ext_modules=[CargoExtension()],
    cmdclass={"build_ext": CargoBuild},
)
