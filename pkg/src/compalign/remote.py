"""HTTP plumbing shared by the remote QA, VQA and segmentation clients."""

from __future__ import annotations

import base64
import io
import json
import logging
import time

import numpy as np
import requests
from PIL import Image

from .errors import ProtocolError, TransportError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3


def post_json(url: str, body: dict, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES,
              backoff: float = 0.5):
    """POST ``body`` as UTF-8 JSON and return the decoded response.

    Connection failures, timeouts and 5xx answers are retried ``retries`` times
    with exponential backoff and then raised as :class:`TransportError`.  Any
    other non-200 status or an undecodable body is a :class:`ProtocolError`
    carrying the raw payload.
    """
    data = json.dumps(body).encode("utf-8")
    headers = {"Content-Type": "application/json; charset=utf-8"}
    last = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = requests.post(url, data=data, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last = exc
            log.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
            continue
        if resp.status_code >= 500:
            last = f"HTTP {resp.status_code}"
            log.warning("POST %s returned %d (attempt %d)", url, resp.status_code, attempt + 1)
            continue
        if resp.status_code != 200:
            raise ProtocolError(f"HTTP {resp.status_code} from {url}", resp.content)
        try:
            return json.loads(resp.content.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"undecodable response from {url}: {exc}", resp.content) from exc
    raise TransportError(f"POST {url} failed after {retries + 1} attempts: {last}")


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG")
    return buf.getvalue()


def read_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)))


def encode_image(image: np.ndarray) -> str:
    """RGB uint8 array (or boolean bitmap) to base64 PNG."""
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    return base64.b64encode(png_bytes(image)).decode("ascii")


def decode_image(text: str) -> np.ndarray:
    try:
        return read_png(base64.b64decode(text, validate=True))
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ProtocolError(f"not a base64 PNG: {exc}", text) from exc


def decode_bitmap(text: str) -> np.ndarray:
    arr = decode_image(text)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 127
