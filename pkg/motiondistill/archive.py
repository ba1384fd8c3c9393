'''
The on-disk array archive shared by body model assets and checkpoints.

An archive is a directory holding a ``manifest.json`` and one raw
little-endian, row-major ``.bin`` file per floating point array.
Small integer arrays (kinematic tree, faces, joint index sets) are
stored inline in the manifest. Every ``.bin`` file is listed with its
shape, dtype, endianness and sha256 digest::

    {
      "format": "motiondistill-archive",
      "version": 1,
      "arrays": {"template_vertices": {"file": "template_vertices.bin",
                                       "shape": [10475, 3],
                                       "dtype": "float32",
                                       "endianness": "little",
                                       "sha256": "..."}},
      "inline": {"parents": [-1, 0, 0, ...], "faces": [[0, 1, 2], ...]},
      "header": {...}
    }
'''
import hashlib
import json
import logging
import os

import numpy as np

from motiondistill.errors import ChecksumError

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 'motiondistill-archive'
ARCHIVE_VERSION = 1
MANIFEST_NAME = 'manifest.json'

_DTYPES = {
    'float32': np.dtype('<f4'),
    'float64': np.dtype('<f8'),
}


def write_archive(path, arrays, inline=None, header=None, float_dtype='float32'):
    '''
    Write a dictionary of arrays to the archive directory ``path``.

    arrays        name -> floating point array
    inline        name -> integer array, stored in the manifest
    header        JSON-serialisable dictionary stored verbatim
    float_dtype   'float32' for assets; None keeps the dtype of each array
                  (checkpoints need this to round-trip bit-exactly)

    The manifest is written last, so a crashed write never leaves a
    readable archive behind.
    '''
    os.makedirs(path, exist_ok=True)
    entries = {}
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype_name = float_dtype or array.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError('unsupported archive dtype %r for array %r' % (dtype_name, name))
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes()
        filename = name + '.bin'
        with open(os.path.join(path, filename), 'wb') as stream:
            stream.write(raw)
        entries[name] = {
            'file': filename,
            'shape': list(array.shape),
            'dtype': dtype_name,
            'endianness': 'little',
            'sha256': hashlib.sha256(raw).hexdigest(),
        }

    manifest = {
        'format': ARCHIVE_FORMAT,
        'version': ARCHIVE_VERSION,
        'arrays': entries,
        'inline': {
            name: np.asarray(value).tolist()
            for name, value in (inline or {}).items()
        },
        'header': header or {},
    }
    with open(os.path.join(path, MANIFEST_NAME), 'w') as stream:
        json.dump(manifest, stream, indent=1, sort_keys=True)
    logger.debug('wrote archive %s with %d arrays', path, len(entries))
    return path


def read_manifest(path):
    '''
    Load and sanity check the manifest of the archive at ``path``.
    '''
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError('no archive manifest at %s' % manifest_path)
    try:
        with open(manifest_path) as stream:
            manifest = json.load(stream)
    except ValueError as err:
        raise ChecksumError('unreadable manifest %s: %s' % (manifest_path, err))
    if not isinstance(manifest, dict) or manifest.get('format') != ARCHIVE_FORMAT:
        raise ChecksumError('%s is not a motiondistill archive' % manifest_path)
    if manifest.get('version') != ARCHIVE_VERSION:
        raise ChecksumError('unsupported archive version %r' % manifest.get('version'))
    return manifest


def read_archive(path):
    '''
    Read an archive written by write_archive.

    It returns (arrays, inline, header): float arrays in their stored
    dtype, inline integer arrays as int64, and the header dictionary.
    A digest or size mismatch raises ChecksumError.
    '''
    manifest = read_manifest(path)
    arrays = {}
    for name, entry in manifest['arrays'].items():
        filename = os.path.join(path, entry['file'])
        try:
            with open(filename, 'rb') as stream:
                raw = stream.read()
        except FileNotFoundError:
            raise ChecksumError('array %r is listed but %s is missing' % (name, filename))
        if hashlib.sha256(raw).hexdigest() != entry['sha256']:
            raise ChecksumError('checksum mismatch for array %r in %s' % (name, path))
        if entry.get('endianness', 'little') != 'little' or entry['dtype'] not in _DTYPES:
            raise ChecksumError('unsupported encoding for array %r' % name)
        dtype = _DTYPES[entry['dtype']]
        shape = tuple(entry['shape'])
        if len(raw) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ChecksumError('array %r has %d bytes, expected shape %s' % (name, len(raw), shape))
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))

    inline = {
        name: np.asarray(value, dtype=np.int64)
        for name, value in manifest['inline'].items()
    }
    return arrays, inline, manifest['header']
