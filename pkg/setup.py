from setuptools import setup, find_packages

setup(
    name="delaypipe",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    install_requires=[
        "click>=8.0.0",
        "numpy>=1.22",
        "networkx>=2.8",
        "tomli>=2.0.0; python_version < '3.11'",
    ],
    entry_points={
        "console_scripts": [
            "delaypipe=delaypipe.main:main",
        ],
    },
    python_requires=">=3.8",
    description="Derive, plan and simulate pipelined backpropagation with delayed gradients",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
)
