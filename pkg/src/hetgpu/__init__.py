"""hetgpu: write a GPU kernel once, run it on SIMT and MIMD devices, and move
it between them mid-execution."""

__version__ = "0.1.0"
