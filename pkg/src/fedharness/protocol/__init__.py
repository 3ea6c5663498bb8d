"""Parameter-server protocol: wire format, transports, server and client loops."""

from .client import ClientNode, client_loop, run_client
from .messages import Message, MessageType, ProtocolError, decode, encode, frame, unframe
from .server import RunSummary, Server, ServerConfig, ServerError, ServerStopped, TcpServer, run_server
from .simulate import simulate
