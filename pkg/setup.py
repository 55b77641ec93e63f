from setuptools import setup

setup(
    name="ffpipe",
    version="0.1.0",
    description="Pipelined Forward-Forward training across threads, processes and machines",
    packages=["ffpipe", "ffpipe.transport"],
    python_requires=">=3.12",
    install_requires=["numpy", "python-dotenv", "requests", "crcmod"],
    extras_require={"dev": ["pytest"]},
    entry_points={"console_scripts": ["ffpipe=ffpipe.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3.12",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
