"""
Guidance provider served by an external model process over HTTP.

Protocol version 1. Every request and response is a JSON record carrying
"protocol": 1; images travel as base64-encoded PFM payloads.

  GET  {endpoint}/v1/describe        -> {capabilities, identity_dim, conditioning, has_unconditional}
  POST {endpoint}/v1/predict_epsilon -> {eps, eps_uncond?}
  POST {endpoint}/v1/inpaint         -> {image}
  POST {endpoint}/v1/refine          -> {image}
"""

import base64
import hashlib
import json
import logging

import numpy as np
import requests

from conditions import ConditionBundle
from diffusion import DiffusionSchedule
from errors import InvalidArgumentError, SculptError
from guidance import INPAINT, PREDICT_EPSILON, REFINE, GuidanceProvider
from image_io import RasterImage, decode_pfm, encode_pfm

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 120


class ProviderTransportError(SculptError):
    pass


def _pack(image: np.ndarray | RasterImage | None) -> str | None:
    if image is None:
        return None
    raster = image if isinstance(image, RasterImage) else RasterImage(image)
    return base64.b64encode(encode_pfm(raster)).decode("ascii")


def _unpack(payload: str) -> np.ndarray:
    return decode_pfm(base64.b64decode(payload)).data


def bundle_record(bundle: ConditionBundle) -> dict:
    camera = None
    if bundle.camera is not None:
        c = bundle.camera
        camera = {"azimuth": c.azimuth, "elevation": c.elevation, "distance": c.distance,
                  "fovy": c.fovy, "look_at": list(c.look_at), "width": c.width, "height": c.height}
    return {
        "text_tag": bundle.text_tag,
        "identity": bundle.identity.tolist(),
        "render_mode": bundle.render_mode,
        "camera": camera,
        "landmark_image": _pack(bundle.landmark_image),
        "normal_image": _pack(bundle.normal_image),
        "canny_image": _pack(bundle.canny_image),
        "depth_image": _pack(bundle.depth_image),
    }


class HttpGuidanceProvider(GuidanceProvider):
    name = "http"

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()
        self._described = False
        self._capabilities = frozenset()
        self._identity_dim = None
        self._has_uncond = False
        self.conditioning = ()
        self._last = None          # one cached predict response; cond and uncond share it

    def _describe(self) -> None:
        if self._described:
            return
        data = self._call("GET", "describe")
        self._capabilities = frozenset(data.get("capabilities", []))
        self._identity_dim = data.get("identity_dim")
        self._has_uncond = bool(data.get("has_unconditional", False))
        self.conditioning = tuple(data.get("conditioning", []))
        self._described = True
        logger.info(f"Provider at {self.endpoint}: capabilities {sorted(self._capabilities)}, "
                    f"identity dim {self._identity_dim}")

    @property
    def capabilities(self) -> frozenset:
        self._describe()
        return self._capabilities

    @property
    def identity_dim(self) -> int | None:
        self._describe()
        return self._identity_dim

    @property
    def has_unconditional(self) -> bool:
        self._describe()
        return self._has_uncond

    def _call(self, method: str, route: str, payload: dict | None = None) -> dict:
        url = f"{self.endpoint}/v1/{route}"
        try:
            if method == "GET":
                resp = self.session.get(url, timeout=self.timeout)
            else:
                resp = self.session.post(url, json={"protocol": PROTOCOL_VERSION, **(payload or {})},
                                         timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()
        except requests.HTTPError as e:
            logger.warning(f"Provider HTTP error on {route}: {e}")
            raise ProviderTransportError(f"Provider request '{route}' failed: {e}") from e
        except (requests.RequestException, ValueError) as e:
            logger.warning(f"Provider transport error on {route}: {e}")
            raise ProviderTransportError(f"Provider request '{route}' failed: {e}") from e
        if data.get("protocol") != PROTOCOL_VERSION:
            raise ProviderTransportError(
                f"Provider answered protocol {data.get('protocol')!r}, expected {PROTOCOL_VERSION}"
            )
        return data

    def _timestep_record(self, t: int, schedule: DiffusionSchedule) -> dict:
        return {"t": int(t), "num_steps": schedule.num_steps, "alpha_bar": float(schedule.alpha_bar[t])}

    def _predict(self, x_t, t, bundle, schedule) -> dict:
        self.require(PREDICT_EPSILON)
        self.check_bundle(bundle)
        payload = {**self._timestep_record(t, schedule), "x_t": _pack(x_t), "bundle": bundle_record(bundle)}
        # keyed on request content, so equal bundles share a response and distinct ones never do
        key = hashlib.sha1(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        data = self._call("POST", "predict_epsilon", payload)
        self._last = (key, data)
        return data

    def predict_epsilon(self, x_t, t, bundle, schedule):
        eps = _unpack(self._predict(x_t, t, bundle, schedule)["eps"])
        if eps.shape != np.shape(x_t):
            raise InvalidArgumentError(f"Provider returned eps of shape {eps.shape} for {np.shape(x_t)}")
        return eps

    def predict_epsilon_uncond(self, x_t, t, bundle, schedule):
        data = self._predict(x_t, t, bundle, schedule)
        if data.get("eps_uncond") is None:
            return _unpack(data["eps"])
        return _unpack(data["eps_uncond"])

    def inpaint(self, partial, known_mask, bundle):
        self.require(INPAINT)
        self.check_bundle(bundle)
        data = self._call("POST", "inpaint", {
            "image": _pack(partial), "known_mask": _pack(known_mask.astype(np.float64)),
            "bundle": bundle_record(bundle),
        })
        return _unpack(data["image"])

    def refine(self, x0, t, bundle, schedule, rng):
        self.require(REFINE)
        self.check_bundle(bundle)
        data = self._call("POST", "refine", {
            **self._timestep_record(t, schedule), "image": _pack(x0),
            "seed": int(rng.integers(0, 2 ** 31 - 1)), "bundle": bundle_record(bundle),
        })
        return _unpack(data["image"])
