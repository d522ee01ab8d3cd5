# Copyright DB InfraGO AG and contributors
# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

import base64
import copy
import hashlib
import logging
import os

import logfmter
import numpy as np


class MeshPatchError(Exception):
    """Base class for all errors raised by the processing pipeline."""


def compute_hash(data: bytes) -> str:
    """Compute the checksum used to protect exported blobs."""
    hasher = hashlib.blake2b(digest_size=16, usedforsecurity=False)
    hasher.update(data)
    return base64.urlsafe_b64encode(hasher.digest()).decode("utf-8")


def compute_file_hash(file_path: str | os.PathLike[str]) -> str:
    """Compute a checksum for the given file, or "" if it is missing."""
    try:
        with open(file_path, "rb") as f:
            return compute_hash(f.read())
    except FileNotFoundError:
        return ""


def name_key(name: str) -> int:
    """Derive a stable 64-bit integer from a file name.

    Used as a seed component, so it must not depend on the Python hash
    seed.
    """
    hasher = hashlib.blake2b(
        name.encode("utf-8"), digest_size=8, usedforsecurity=False
    )
    return int.from_bytes(hasher.digest(), "little")


class Logfmter(logfmter.Logfmter):
    def format(self, record: logging.LogRecord) -> str:
        record = copy.copy(record)

        for key, value in list(vars(record).items()):
            if isinstance(value, np.generic):
                setattr(record, key, value.item())

        if isinstance(record.args, tuple):
            record.args = tuple(
                a.item() if isinstance(a, np.generic) else a
                for a in record.args
            )

        return super().format(record)
