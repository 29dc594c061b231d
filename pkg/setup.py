from setuptools import setup, find_packages

setup(
    # Requirements
    python_requires=">=3.9",

    # Metadata
    name = "kernelrct",
    version = "0.1.0",
    description = "Kernel-method design and analysis of two-arm trials with longitudinal outcomes",

    # Packages
    packages = find_packages(exclude=["tests"]),

    # Dependencies
    install_requires = [
        "numpy",
        "scipy",
        "pyyaml",
    ],
    extras_require = {
        "dev": [
            "pandas",
            "pytest",
            "statsmodels",
        ],
    },

    # Executables
    entry_points = {
        "console_scripts": [
            "kernel-rct = kernelrct.cli.rct:main",
        ]
    },

    # Packaging information
    platforms = "any",
)

# vim: set et sw=4 ts=4:
