#!/usr/bin/env python3

import sys

if sys.version_info < (3, 10, 0):
    print("Python 3.10+ is required")
    exit(1)
import io  # noqa E402
import os  # noqa E402
from setuptools import find_packages, setup  # noqa E402
from pathlib import Path  # noqa E402
from typing import List  # noqa E402

CURDIR = Path(__file__).parent

EXCLUDE_FROM_PACKAGES = ["tests*"]


with io.open(os.path.join(CURDIR, "README.md"), "r", encoding="utf-8") as f:
    README = f.read()


def read_requirements(path: Path) -> List[str]:
    lines = (line.split("#", 1)[0].strip() for line in path.read_text(encoding="utf-8").splitlines())
    return [line for line in lines if line]


setup(
    name="refaudio",
    version="0.1.0",
    author="greenantix",
    author_email="your-email@example.com",
    description="Reference-conditioned text-to-audio generation with rectified flow matching",
    long_description=README,
    long_description_content_type="text/markdown",
    url="https://github.com/greenantix/refaudio",
    license="License :: OSI Approved :: MIT License",
    packages=find_packages("src", exclude=EXCLUDE_FROM_PACKAGES),
    package_dir={"": "src"},
    include_package_data=True,
    keywords=[
        "audio",
        "text-to-audio",
        "flow-matching",
        "rectified-flow",
        "controlnet",
        "sound-events",
        "python",
        "torch",
    ],
    scripts=[],
    entry_points={"console_scripts": ["refaudio = refaudio.cli:main"]},
    extras_require={"test": ["pytest>=7.0", "hypothesis>=6.0"]},
    zip_safe=False,
    python_requires=">=3.10",
    install_requires=read_requirements(CURDIR / "requirements.txt"),
    classifiers=[
        "Operating System :: OS Independent",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3 :: Only",
        "Topic :: Multimedia :: Sound/Audio",
    ],
)
