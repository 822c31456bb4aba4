from edgeslam.version import __version__
