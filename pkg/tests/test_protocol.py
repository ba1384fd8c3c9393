'''
Tests of the mdsv1 framing, the client and the loopback score server
'''
import socket
import struct

import motiondistill as md
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from motiondistill import protocol
from motiondistill.errors import ConfigError, ProtocolError, RemoteScoreError, TransportError
from helper_functions_for_tests import get_random_video


@pytest.fixture
def echo_server():
    server = md.serve_in_thread(md.EchoScoreModel(2))
    yield server
    server.shutdown()
    server.server_close()


def _endpoint(server):
    return '%s:%d' % server.server_address


def test_message_layout():
    '''
    a message body starts with the magic, type and text, then sigma,
    scale and the tensor
    '''
    tensor = np.arange(6, dtype=np.float32).reshape(2, 3)
    body = protocol.encode_message(protocol.Message(
        kind=protocol.PREDICT_NOISE, text='walk', sigma=0.5, scale=100., tensor=tensor))
    assert body[:4] == b'MDS1'
    assert body[4] == protocol.PREDICT_NOISE
    assert struct.unpack('<I', body[5:9]) == (4,)
    assert body[9:13] == b'walk'
    assert struct.unpack('<ffB', body[13:22]) == (0.5, 100., 2)
    assert struct.unpack('<2I', body[22:30]) == (2, 3)
    assert body[30:] == tensor.tobytes()
    assert len(body) == 30 + 24

    message = protocol.decode_message(body)
    assert message.kind == protocol.PREDICT_NOISE
    assert message.text == 'walk'
    assert message.sigma == 0.5 and message.scale == 100.
    assert message.tensor.tobytes() == tensor.tobytes()


def test_malformed_bodies():
    '''
    bad magic, unknown types, truncation and trailing bytes raise ProtocolError
    '''
    body = protocol.encode_message(protocol.Message(
        kind=protocol.ENCODE, tensor=np.zeros((2, 2), dtype=np.float32)))
    with pytest.raises(ProtocolError):
        protocol.decode_message(b'XXXX' + body[4:])
    with pytest.raises(ProtocolError):
        protocol.decode_message(body[:4] + b'\x07' + body[5:])
    with pytest.raises(ProtocolError):
        protocol.decode_message(body[:-1])
    with pytest.raises(ProtocolError):
        protocol.decode_message(body + b'\x00')
    with pytest.raises(ProtocolError):
        protocol.decode_message(body[:6])
    with pytest.raises(ProtocolError):
        protocol.encode_message(protocol.Message(kind=3))


@settings(max_examples=300)
@given(st.binary(max_size=64))
def test_random_bytes_never_crash_the_decoder(body):
    '''
    arbitrary input either decodes or raises ProtocolError
    '''
    try:
        message = protocol.decode_message(body)
    except ProtocolError:
        return
    assert message.kind in protocol.MESSAGE_TYPES


def test_parse_endpoint():
    '''
    host:port strings are split; anything else is a configuration error
    '''
    assert md.parse_endpoint('localhost:7070') == ('localhost', 7070)
    assert md.parse_endpoint('::1:80') == ('::1', 80)
    for bad in ('localhost', ':80', 'host:0', 'host:port', 'host:70000'):
        with pytest.raises(ConfigError):
            md.parse_endpoint(bad)


def test_loopback_predict_noise_is_bit_exact(echo_server):
    '''
    the echo model answers z_t, which survives the framing bit for bit
    '''
    model = md.external_adapter(_endpoint(echo_server), downsample=2)
    assert not model.differentiable_encoder
    rng = np.random.default_rng(0)
    latents = torch.tensor(rng.normal(size=(3, 4, 5, 5)), dtype=torch.float32)
    eps = model.predict_noise(latents, 0.37, md.PromptEmbedding.from_text('a person jumping'), 100.)
    assert eps.dtype == torch.float32
    assert eps.numpy().tobytes() == latents.numpy().tobytes()
    model.close()


def test_remote_encode(echo_server):
    '''
    the remote encoder matches the local proxy encoder of the echo server
    '''
    model = md.external_adapter(_endpoint(echo_server), downsample=2)
    video = get_random_video(np.random.default_rng(1), n_frames=2, resolution=(8, 8), dtype=torch.float32)
    remote = model.remote_encode(video).latents
    local = model.encode(video).latents
    assert remote.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(remote.numpy(), local.numpy(), atol=1e-6)
    model.close()


def test_server_reports_bad_requests(echo_server):
    '''
    a request the model refuses comes back as RemoteScoreError, and the
    connection stays usable
    '''
    client = protocol.ProtocolClient(*echo_server.server_address, timeout=5.)
    request = protocol.Message(kind=protocol.PREDICT_NOISE, text='x', sigma=1.5, scale=1.,
                               tensor=np.zeros((1, 4, 2, 2), dtype=np.float32))
    with pytest.raises(RemoteScoreError):
        client.request(request)
    assert client.health() == protocol.VERSION
    client.close()


def test_server_survives_malformed_frames(echo_server):
    '''
    garbage inside a well-formed length prefix is answered with an
    error frame on the same connection
    '''
    with socket.create_connection(echo_server.server_address, timeout=5.) as sock:
        garbage = b'not a message at all'
        sock.sendall(struct.pack('<I', len(garbage)) + garbage)
        reply = protocol.recv_message(sock)
        assert reply.kind == protocol.ERROR
        protocol.send_message(sock, protocol.Message(kind=protocol.HEALTH))
        assert protocol.recv_message(sock).text == protocol.VERSION


def test_oversized_frame_drops_the_connection(echo_server):
    '''
    a length prefix above the limit gets an error frame and a closed socket
    '''
    with socket.create_connection(echo_server.server_address, timeout=5.) as sock:
        sock.sendall(struct.pack('<I', protocol.MAX_FRAME_BYTES + 1))
        reply = protocol.recv_message(sock)
        assert reply.kind == protocol.ERROR
        assert protocol.recv_frame(sock) is None


def test_unreachable_server():
    '''
    connection failures are retried and then raise TransportError
    '''
    with socket.socket() as sock:
        sock.bind(('127.0.0.1', 0))
        port = sock.getsockname()[1]
    client = protocol.ProtocolClient('127.0.0.1', port, timeout=1., retries=2, backoff=0.)
    with pytest.raises(TransportError):
        client.health()


class _OldClient:
    host = 'old'
    port = 1

    def health(self):
        return 'mdsv0'

    def close(self):
        pass


def test_version_mismatch():
    '''
    a server speaking another protocol version is refused
    '''
    with pytest.raises(ProtocolError):
        protocol.ExternalScoreModel(_OldClient())
