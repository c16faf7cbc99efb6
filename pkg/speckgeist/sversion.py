#
# speckgeist version
#

__version__ = "0.3.0"


def version():
    return __version__
