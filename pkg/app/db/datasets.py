"""Point data files for the diffusion mean and the sample command.

JSON files hold ``{"manifold_id": ..., "points": [[...], ...]}``; CSV files
have a header row and one point per line in public coordinates. A CSV file
carries no manifold id, so the caller supplies it.
"""

import csv
import io
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import orjson
from loguru import logger

from app.core.exceptions import BridgeError, DataFileError, UsageError
from app.db.base import store
from app.models.geometry import ManifoldPoint
from app.services.manifolds import Manifold, get_manifold, point_model


def load_points(path: Union[str, Path], manifold_id: Optional[str] = None) -> List[ManifoldPoint]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise DataFileError(f"could not read {p}: {e}", path=str(p))

    try:
        if p.suffix.lower() == ".json":
            doc = orjson.loads(raw)
            if isinstance(doc, dict):
                manifold_id = doc.get("manifold_id", manifold_id)
                rows = doc.get("points")
            else:
                rows = doc
            if not isinstance(rows, list):
                raise ValueError("expected a list of points")
        else:
            reader = csv.reader(io.StringIO(raw.decode("utf-8")))
            lines = [line for line in reader if line]
            if not lines:
                raise ValueError("empty file")
            header, rows = lines[0], lines[1:]
            try:
                float(header[0])
                rows = lines  # no header row
            except ValueError:
                pass
        coords = [[float(c) for c in row] for row in rows]
    except (ValueError, TypeError, UnicodeDecodeError, orjson.JSONDecodeError) as e:
        raise DataFileError(f"malformed data file {p}: {e}", path=str(p))

    if not manifold_id:
        raise UsageError(f"{p} does not name its manifold; pass --manifold")
    if not coords:
        raise DataFileError(f"{p} holds no points", path=str(p))

    try:
        manifold = get_manifold(manifold_id)
        points = []
        for row in coords:
            internal = manifold.project(manifold.to_internal(row))
            manifold.validate_point(internal)
            points.append(point_model(manifold, internal))
    except BridgeError as e:
        raise DataFileError(f"invalid point in {p}: {e.detail}", path=str(p))
    logger.info(f"Loaded {len(points)} point(s) on {manifold.manifold_id} from {p}")
    return points


def save_points(name: Union[str, Path], manifold: Manifold, points: np.ndarray) -> Path:
    """Write internal points through the result store, JSON or CSV by suffix."""
    public = manifold.to_public(points)
    if Path(name).suffix.lower() == ".csv":
        header = [f"x{i}" for i in range(public.shape[1])]
        return store.write_csv(name, header, public.tolist())
    return store.write_json(name, {"manifold_id": manifold.manifold_id, "points": public.tolist()})
