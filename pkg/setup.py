from setuptools import setup, find_packages

setup(
    name="hypervoltran",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "python-dotenv>=1.0.0",
        "rich>=13.7.0",
        "typer>=0.9.0,<0.26",
        "pydantic>=2.0.0",
        "click>=8.0.0",
        "torch>=2.0.0",
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "PyMCubes>=0.1.4",
        "trimesh>=4.0.0",
        "Pillow>=10.0.0",
        "matplotlib>=3.7.0",
    ],
    entry_points={
        "console_scripts": [
            "hypervoltran=hypervoltran.cli:main",
        ],
    },
    description="Feed-forward signed-distance reconstruction from a handful of posed views",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "black>=23.0.0",
            "flake8>=6.0.0",
            "mypy>=1.0.0",
            "isort>=5.0.0",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
