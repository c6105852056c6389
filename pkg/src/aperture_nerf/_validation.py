"""Input validation helpers shared by the estimator, metrics and CLI."""
from __future__ import annotations

import numpy as np

from .geometry import ApertureCamera


def check_camera(camera) -> ApertureCamera:
    """Accept an ``ApertureCamera`` or its dict form."""
    if isinstance(camera, ApertureCamera):
        return camera
    if isinstance(camera, dict):
        return ApertureCamera.from_dict(camera)
    raise TypeError(f"expected an ApertureCamera or dict, got {type(camera).__name__}")


def check_cameras(cameras) -> list:
    if isinstance(cameras, (ApertureCamera, dict)):
        cameras = [cameras]
    cameras = [check_camera(c) for c in cameras]
    if not cameras:
        raise ValueError("need at least one camera")
    return cameras


def check_image(image, camera: ApertureCamera | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if camera is not None and image.shape[:2] != (camera.height, camera.width):
        raise ValueError(f"image shape {image.shape[:2]} does not match camera "
                         f"{(camera.height, camera.width)}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def check_observations(X, y=None) -> list:
    """Normalize ``(observations)`` or ``(cameras, images)`` into a list of observations."""
    from .training import Observation

    if y is None:
        obs = list(X)
        if not obs:
            raise ValueError("need at least one observation")
        bad = [type(o).__name__ for o in obs if not isinstance(o, Observation)]
        if bad:
            raise TypeError(f"expected Observation items, got {bad[0]}; "
                            "pass cameras and images as fit(cameras, images)")
        return obs
    cameras = check_cameras(X)
    images = list(y)
    if len(images) != len(cameras):
        raise ValueError(f"{len(cameras)} cameras but {len(images)} images")
    return [Observation(check_image(im, cam), cam) for cam, im in zip(cameras, images)]


def check_depth_pair(pred, gt, mask=None):
    """Shape-checked float copies of two depth maps plus a boolean validity mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValueError(f"mask shape {mask.shape} does not match depth shape {pred.shape}")
    if not mask.any():
        raise ValueError("validity mask is empty")
    if not (np.all(np.isfinite(pred[mask])) and np.all(np.isfinite(gt[mask]))):
        raise ValueError("depths must be finite inside the mask")
    return pred, gt, mask

