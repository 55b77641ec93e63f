from .base import DEFAULT_TIMEOUT, BaseTransport
from .board import Board
from .inproc import InProcessNetwork, InProcessTransport
from .tcp import BoardServer, TcpNetwork, TcpTransport

VALID_TRANSPORTS = {'inproc', 'tcp'}

__all__ = ['DEFAULT_TIMEOUT', 'VALID_TRANSPORTS', 'BaseTransport', 'Board', 'BoardServer',
           'InProcessNetwork', 'InProcessTransport', 'TcpNetwork', 'TcpTransport']
