'''
The mdsv1 wire protocol between the trainer and a remote score model.

Every message is a little-endian u32 length followed by a body::

    magic        4 bytes  b'MDS1'
    type         u8       0 health, 1 encode, 2 predict_noise, 255 error
    text length  u32
    text         UTF-8, the prompt (or the version / error message in replies)
    sigma        f32
    scale        f32      guidance scale
    ndim         u8       0 when the message carries no tensor
    dims         u32[ndim]
    payload      float32, row-major, prod(dims) values

Replies mirror the request type. A server answers a malformed body
with an error frame and keeps the connection open.
'''
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np
import torch

from motiondistill.diffusion_backend import (
    DEFAULT_DOWNSAMPLE, LatentVideo, PoolingEncoder, PromptEmbedding, ScoreModel)
from motiondistill.errors import ConfigError, ProtocolError, RemoteScoreError, TransportError
from motiondistill.renderer import Video

logger = logging.getLogger(__name__)

MAGIC = b'MDS1'
VERSION = 'mdsv1'
HEALTH = 0
ENCODE = 1
PREDICT_NOISE = 2
ERROR = 255
MESSAGE_TYPES = (HEALTH, ENCODE, PREDICT_NOISE, ERROR)
MAX_FRAME_BYTES = 1 << 30

_LENGTH = struct.Struct('<I')
_HEAD = struct.Struct('<4sBI')
_SCALARS = struct.Struct('<ffB')
_PAYLOAD_DTYPE = np.dtype('<f4')


@dataclass
class Message:
    kind: int
    text: str = ''
    sigma: float = 0.
    scale: float = 0.
    tensor: np.ndarray = None


def encode_message(message):
    '''
    Serialise a Message into a body (without the length prefix).
    '''
    if message.kind not in MESSAGE_TYPES:
        raise ProtocolError('unknown message type %r' % message.kind)
    text = message.text.encode('utf-8')
    parts = [
        _HEAD.pack(MAGIC, message.kind, len(text)),
        text,
    ]
    if message.tensor is None:
        parts.append(_SCALARS.pack(message.sigma, message.scale, 0))
    else:
        tensor = np.ascontiguousarray(message.tensor, dtype=_PAYLOAD_DTYPE)
        if tensor.ndim > 255:
            raise ProtocolError('tensor has too many dimensions (%d)' % tensor.ndim)
        parts.append(_SCALARS.pack(message.sigma, message.scale, tensor.ndim))
        parts.append(struct.pack('<%dI' % tensor.ndim, *tensor.shape))
        parts.append(tensor.tobytes())
    return b''.join(parts)


def decode_message(body):
    '''
    Parse a body produced by encode_message. Any inconsistency raises
    ProtocolError.
    '''
    try:
        magic, kind, text_length = _HEAD.unpack_from(body, 0)
        offset = _HEAD.size
        if magic != MAGIC:
            raise ProtocolError('bad magic %r' % magic)
        if kind not in MESSAGE_TYPES:
            raise ProtocolError('unknown message type %d' % kind)
        if offset + text_length > len(body):
            raise ProtocolError('text length %d exceeds the frame' % text_length)
        text = body[offset:offset + text_length].decode('utf-8')
        offset += text_length
        sigma, scale, ndim = _SCALARS.unpack_from(body, offset)
        offset += _SCALARS.size
        tensor = None
        if ndim:
            dims = struct.unpack_from('<%dI' % ndim, body, offset)
            offset += 4 * ndim
            size = _PAYLOAD_DTYPE.itemsize * int(np.prod(dims, dtype=np.int64))
            if offset + size != len(body):
                raise ProtocolError('payload has %d bytes, dims %s need %d' % (
                    len(body) - offset, list(dims), size))
            tensor = np.frombuffer(body, dtype=_PAYLOAD_DTYPE, count=size // 4, offset=offset)
            tensor = tensor.reshape(dims).astype(np.float32)
            offset += size
    except struct.error as err:
        raise ProtocolError('truncated frame: %s' % err)
    except UnicodeDecodeError as err:
        raise ProtocolError('text is not UTF-8: %s' % err)
    if offset != len(body):
        raise ProtocolError('%d trailing bytes after the message' % (len(body) - offset))
    return Message(kind=kind, text=text, sigma=sigma, scale=scale, tensor=tensor)


def _recv_exact(sock, n_bytes):
    chunks = []
    remaining = n_bytes
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def send_message(sock, message):
    body = encode_message(message)
    sock.sendall(_LENGTH.pack(len(body)) + body)


def recv_frame(sock):
    '''
    Read one length-prefixed body; None when the peer closed cleanly.
    '''
    prefix = _recv_exact(sock, _LENGTH.size)
    if not prefix:
        return None
    if len(prefix) < _LENGTH.size:
        raise ProtocolError('connection closed inside a length prefix')
    length, = _LENGTH.unpack(prefix)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError('frame of %d bytes exceeds the limit' % length)
    body = _recv_exact(sock, length)
    if len(body) < length:
        raise ProtocolError('connection closed after %d of %d bytes' % (len(body), length))
    return body


def recv_message(sock):
    body = recv_frame(sock)
    return None if body is None else decode_message(body)


def error_message(text):
    return Message(kind=ERROR, text=str(text))


def parse_endpoint(endpoint):
    '''
    'host:port' -> (host, port)
    '''
    host, _, port = str(endpoint).rpartition(':')
    try:
        port = int(port)
    except ValueError:
        port = -1
    if not host or not 0 < port < 65536:
        raise ConfigError('endpoint must look like host:port, got %r' % endpoint)
    return host, port


class ProtocolClient:
    '''
    One persistent connection, serialised by a lock. Connection failures
    are retried with exponential backoff; malformed replies are not.
    '''

    def __init__(self, host, port, timeout=30., retries=3, backoff=0.1):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sock = None
        self._lock = threading.Lock()

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def request(self, message):
        with self._lock:
            reply = self._request_with_retries(message)
        if reply.kind == ERROR:
            raise RemoteScoreError('score server at %s:%d: %s' % (self.host, self.port, reply.text))
        return reply

    def _request_with_retries(self, message):
        failure = None
        for attempt in range(self.retries):
            try:
                if self._sock is None:
                    self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                send_message(self._sock, message)
                reply = recv_message(self._sock)
                if reply is None:
                    raise ConnectionError('server closed the connection')
                return reply
            except ProtocolError:
                self.close()
                raise
            except OSError as err:
                self.close()
                failure = err
                logger.warning('request to %s:%d failed (attempt %d of %d): %s',
                               self.host, self.port, attempt + 1, self.retries, err)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise TransportError('score server at %s:%d unreachable after %d attempts: %s' % (
            self.host, self.port, self.retries, failure))

    def health(self):
        return self.request(Message(kind=HEALTH)).text


class ExternalScoreModel(ScoreModel):
    '''
    predict_noise is answered by a remote mdsv1 server; encode uses the
    local differentiable proxy encoder.
    '''
    differentiable_encoder = False

    def __init__(self, client, downsample=DEFAULT_DOWNSAMPLE):
        super(ExternalScoreModel, self).__init__(PoolingEncoder(downsample))
        self.client = client
        version = client.health()
        if version != VERSION:
            client.close()
            raise ProtocolError('server speaks %r, expected %r' % (version, VERSION))
        logger.info('connected to score server %s:%d (%s)', client.host, client.port, version)

    def denoise(self, latents, sigma, prompt):
        return self.predict_noise(latents, sigma, prompt, 1.)

    def predict_noise(self, z_t, sigma, prompt, guidance_scale):
        latents = z_t.latents if isinstance(z_t, LatentVideo) else z_t
        request = Message(
            kind=PREDICT_NOISE,
            text=prompt.key,
            sigma=float(sigma),
            scale=float(guidance_scale),
            tensor=latents.detach().cpu().numpy(),
        )
        reply = self.client.request(request)
        if reply.tensor is None or tuple(reply.tensor.shape) != tuple(latents.shape):
            raise ProtocolError('server returned shape %s for latents %s' % (
                None if reply.tensor is None else list(reply.tensor.shape), list(latents.shape)))
        return torch.from_numpy(reply.tensor).to(latents.dtype)

    def remote_encode(self, video):
        '''
        Encode with the remote encoder; the result carries no gradient.
        '''
        reply = self.client.request(Message(kind=ENCODE, tensor=video.frames.detach().cpu().numpy()))
        if reply.tensor is None:
            raise ProtocolError('encode reply carries no tensor')
        return LatentVideo(torch.from_numpy(reply.tensor))

    def close(self):
        self.client.close()


class _ScoreRequestHandler(socketserver.BaseRequestHandler):

    def handle(self):
        while True:
            try:
                body = recv_frame(self.request)
            except ProtocolError as err:
                logger.warning('dropping connection from %s: %s', self.client_address, err)
                self._reply(error_message(err))
                return
            except OSError:
                return
            if body is None:
                return
            try:
                reply = self.server.dispatch(decode_message(body))
            except (ValueError, RuntimeError, ProtocolError) as err:
                logger.warning('bad request from %s: %s', self.client_address, err)
                reply = error_message(err)
            if not self._reply(reply):
                return

    def _reply(self, message):
        try:
            send_message(self.request, message)
            return True
        except OSError:
            return False


class ScoreModelServer(socketserver.ThreadingTCPServer):
    '''
    Serve any ScoreModel over mdsv1, one thread per connection.
    '''
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, model):
        self.model = model
        socketserver.ThreadingTCPServer.__init__(self, address, _ScoreRequestHandler)

    def dispatch(self, message):
        if message.kind == HEALTH:
            return Message(kind=HEALTH, text=VERSION)
        if message.kind == ENCODE:
            if message.tensor is None:
                raise ProtocolError('encode request carries no video')
            latents = self.model.encode(Video(frames=torch.from_numpy(message.tensor))).latents
            return Message(kind=ENCODE, tensor=latents.detach().cpu().numpy())
        if message.kind == PREDICT_NOISE:
            if message.tensor is None:
                raise ProtocolError('predict_noise request carries no latents')
            prompt = PromptEmbedding(message.text)
            eps = self.model.predict_noise(
                LatentVideo(torch.from_numpy(message.tensor)), float(message.sigma),
                prompt, float(message.scale))
            return Message(kind=PREDICT_NOISE, tensor=eps.detach().cpu().numpy())
        raise ProtocolError('unexpected message type %d from client' % message.kind)


def serve_in_thread(model, host='127.0.0.1', port=0):
    '''
    Start a ScoreModelServer on a daemon thread and return it; the bound
    port is ``server.server_address[1]``. Stop it with
    ``server.shutdown(); server.server_close()``.
    '''
    server = ScoreModelServer((host, port), model)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    logger.info('score server listening on %s:%d', *server.server_address)
    return server
