"""
Gestione dei checkpoint in formato binario "FFRG"

Layout: magic b"FFRG", versione uint32 LE, poi sezioni tipizzate
(tag di 4 byte, lunghezza uint64 LE, payload) nell'ordine
ARCH, PROG, SEED, PARM, OPTM, DGST.

DGST contiene lo SHA-256 di tutti i byte che lo precedono.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives import hashes

from model_zoo import ArchConfig, build_resnet

MAGIC = b"FFRG"
FORMAT_VERSION = 1
SECTION_ORDER = (b"ARCH", b"PROG", b"SEED", b"PARM", b"OPTM", b"DGST")
_HEADER = struct.Struct("<4sI")
_SECTION = struct.Struct("<4sQ")


class CheckpointError(ValueError):
    """Checkpoint corrotto, incompatibile o non scrivibile"""


@dataclass
class CheckpointData:
    config: ArchConfig
    progress: dict
    seeds: dict
    tensors: dict
    velocity: dict = field(default_factory=dict)


def _sha256(data):
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize()


# ===== CODIFICA DEI TENSORI =====

def _encode_tensors(tensors):
    chunks = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype='<f4')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def _decode_tensors(payload, section):
    tensors = {}
    offset = 0
    try:
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (ndim,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if offset + size > len(payload):
                raise CheckpointError(f"Sezione {section.decode()}: dati del tensore {name} troncati")
            tensors[name] = np.frombuffer(payload, dtype='<f4', count=size // 4,
                                          offset=offset).astype(np.float32).reshape(shape)
            offset += size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"Sezione {section.decode()} malformata: {e}")
    if offset != len(payload):
        raise CheckpointError(f"Sezione {section.decode()}: {len(payload) - offset} byte in eccesso")
    return tensors


def _section(tag, payload):
    return _SECTION.pack(tag, len(payload)) + payload


def _json_bytes(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')


# ===== SALVATAGGIO =====

def network_tensors(network):
    """Parametri e statistiche di BatchNorm, indicizzati per nome"""
    tensors = dict(network.named_parameters())
    tensors.update(network.named_buffers())
    return tensors


def save_checkpoint(network, progress, path, seeds=None, velocity=None):
    """
    Scrive il checkpoint

    Args:
        network: Network da salvare
        progress: dict con 'epoch' e 'step'
        path: File di destinazione
        seeds: Stato dei generatori (dict serializzabile JSON)
        velocity: Buffer di momentum per nome di parametro

    Returns:
        Path: file scritto
    """
    path = Path(path)
    progress = {'epoch': int(progress.get('epoch', 0)), 'step': int(progress.get('step', 0))}
    body = _HEADER.pack(MAGIC, FORMAT_VERSION)
    body += _section(b"ARCH", _json_bytes(network.config.to_dict()))
    body += _section(b"PROG", _json_bytes(progress))
    body += _section(b"SEED", _json_bytes(seeds or {}))
    body += _section(b"PARM", _encode_tensors(network_tensors(network)))
    body += _section(b"OPTM", _encode_tensors(velocity or {}))
    body += _section(b"DGST", _sha256(body))

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(body)
    except OSError as e:
        raise CheckpointError(f"Impossibile scrivere il checkpoint {path}: {e}")
    return path


# ===== CARICAMENTO =====

def _split_sections(data):
    if len(data) < _HEADER.size:
        raise CheckpointError("File troncato: intestazione mancante")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"Magic non valido: {magic!r}, atteso {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Versione {version} non supportata (attesa {FORMAT_VERSION})")

    sections = {}
    offset = _HEADER.size
    for expected in SECTION_ORDER:
        name = expected.decode()
        if offset + _SECTION.size > len(data):
            raise CheckpointError(f"File troncato: sezione {name} mancante")
        tag, length = _SECTION.unpack_from(data, offset)
        if tag != expected:
            raise CheckpointError(f"Sezione {name} attesa, trovato tag {tag!r}")
        start = offset + _SECTION.size
        if start + length > len(data):
            raise CheckpointError(f"File troncato: sezione {name} incompleta")
        sections[expected] = (start - _SECTION.size, data[start:start + length])
        offset = start + length
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} byte dopo la sezione DGST")
    return sections


def read_checkpoint(path):
    """
    Legge e verifica un checkpoint senza costruire la rete

    Returns:
        CheckpointData
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint non trovato: {path}")
    data = path.read_bytes()
    sections = _split_sections(data)

    digest_start, digest = sections[b"DGST"]
    if digest != _sha256(data[:digest_start]):
        raise CheckpointError("Sezione DGST: digest SHA-256 non corrispondente, file corrotto")

    try:
        config = ArchConfig.from_dict(json.loads(sections[b"ARCH"][1]))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"Sezione ARCH non valida: {e}")
    try:
        progress = json.loads(sections[b"PROG"][1])
        seeds = json.loads(sections[b"SEED"][1])
    except ValueError as e:
        raise CheckpointError(f"Sezione PROG/SEED non valida: {e}")

    return CheckpointData(
        config=config,
        progress=progress,
        seeds=seeds,
        tensors=_decode_tensors(sections[b"PARM"][1], b"PARM"),
        velocity=_decode_tensors(sections[b"OPTM"][1], b"OPTM"),
    )


def restore_network(checkpoint):
    """Costruisce la rete dell'ArchConfig salvato e copia parametri e statistiche"""
    network = build_resnet(checkpoint.config, 0)
    targets = network_tensors(network)
    missing = sorted(set(targets) - set(checkpoint.tensors))
    extra = sorted(set(checkpoint.tensors) - set(targets))
    if missing or extra:
        raise CheckpointError(f"Sezione PARM incoerente con ARCH: mancanti {missing[:5]}, in eccesso {extra[:5]}")
    for name, target in targets.items():
        stored = checkpoint.tensors[name]
        if stored.shape != target.shape:
            raise CheckpointError(f"Sezione PARM: {name} ha shape {stored.shape}, attesa {target.shape}")
        target[...] = stored
    return network.eval()


def load_checkpoint(path, expected_config=None):
    """
    Carica un checkpoint e ricostruisce la rete in modalità Eval

    Args:
        path: File del checkpoint
        expected_config: ArchConfig dichiarato; se diverso da quello salvato il caricamento è rifiutato

    Returns:
        Network
    """
    checkpoint = read_checkpoint(path)
    if expected_config is not None and checkpoint.config != expected_config:
        raise CheckpointError(
            f"Sezione ARCH: checkpoint per {checkpoint.config.to_dict()}, dichiarato {expected_config.to_dict()}"
        )
    return restore_network(checkpoint)
