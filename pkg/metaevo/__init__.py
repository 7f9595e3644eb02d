"""MetaEvo: self-replicating organisms written in an evolvable meta-language."""

from .chemistry import *  # noqa: F401,F403
from .vm import *  # noqa: F401,F403
from .translator import *  # noqa: F401,F403
from .config import *  # noqa: F401,F403
from .mutation import *  # noqa: F401,F403
from .assembler import *  # noqa: F401,F403
from .world import *  # noqa: F401,F403
from .analysis import *  # noqa: F401,F403
from .cli import *  # noqa: F401,F403
