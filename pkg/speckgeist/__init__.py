from .sversion import __version__, version
