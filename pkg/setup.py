from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()
with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = fh.read().splitlines()

setup(
    name='hmpe',
    version='0.1.0',
    license='MIT',
    description='heatmap-gated positional embeddings, deformable decoding and linear-snake convolution at desk scale',
    long_description=long_description,
    long_description_content_type="text/markdown",
    url='',
    packages=find_packages(
        exclude=["tests", "examples", "examples.*"]
    ),
    install_requires=requirements,
    entry_points={
        "console_scripts": ["hmpe=hmpe.cli:main"],
    },
    python_requires='>=3.9',
    classifiers=[
        "Programming Language :: Python :: 3.9",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
