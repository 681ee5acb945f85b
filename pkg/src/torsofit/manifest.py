"""Model manifest and synthetic-target bundle serialization.

The manifest is a single JSON document (version field mandatory) referencing
the template mesh and per-shape displacement files by relative path:

    {
      "version": 1,
      "template": "template.obj",
      "bones": [{"name", "parent", "rest_rotation", "rest_translation",
                 "joint_anchor"}, ...],
      "weights": [[bone, vertex, weight], ...],        # sparse triplets
      "blendshapes": [{"name", "path"}, ...],          # .npy displacements
      "landmarks": [{"name", "triangle", "barycentric"}, ...],
      "patterns": [{"name", "oriented",
                    "anchors": [{"triangle", "barycentric"}, ...]}, ...]
    }

The ground-truth sidecar stores the sampled parameters and landmark positions
of a synthetic target so recovered registrations can be scored against it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import PatternCurve, SurfaceAnchor, load_mesh, save_mesh
from .rig import BlendWeights, Bone, PoseParams, Skeleton
from .shape import BlendshapeSet, DeformableModel

MANIFEST_VERSION = 1
SIDECAR_VERSION = 1


class ManifestError(Exception):
    pass


def _anchor_dict(anchor: SurfaceAnchor):
    return {"triangle": int(anchor.triangle_index),
            "barycentric": [float(b) for b in anchor.barycentric]}


def _anchor_from(d) -> SurfaceAnchor:
    return SurfaceAnchor(triangle_index=int(d["triangle"]),
                         barycentric=np.array(d["barycentric"]))


def save_model(model: DeformableModel, directory, name="model"):
    """Write manifest + template mesh + blendshape displacement files.

    Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    template_name = "template.obj"
    save_mesh(model.template, directory / template_name)

    shapes = []
    for i, shape_name in enumerate(model.blendshapes.names):
        path = f"blendshape_{i:03d}.npy"
        np.save(directory / path, model.blendshapes.displacements[i])
        shapes.append({"name": shape_name, "path": path})

    bones = [{"name": b.name, "parent": b.parent,
              "rest_rotation": [float(x) for x in b.rest_rotation],
              "rest_translation": [float(x) for x in b.rest_translation],
              "joint_anchor": [float(x) for x in b.joint_anchor]}
             for b in model.skeleton.bones]

    bi, vi = np.nonzero(model.weights.w)
    triplets = [[int(b), int(v), float(model.weights.w[b, v])]
                for b, v in zip(bi, vi)]

    doc = {
        "version": MANIFEST_VERSION,
        "template": template_name,
        "bones": bones,
        "weights": triplets,
        "blendshapes": shapes,
        "landmarks": [{"name": lm_name, **_anchor_dict(a)}
                      for lm_name, a in model.landmarks],
        "patterns": [{"name": p.name, "oriented": bool(p.oriented),
                      "anchors": [_anchor_dict(a) for a in p.anchors]}
                     for p in model.patterns],
    }
    manifest_path = directory / f"{name}.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return manifest_path


def load_model(manifest_path) -> DeformableModel:
    """Read a model manifest written by save_model."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version!r}")
    base = manifest_path.parent

    template, _ = load_mesh(base / doc["template"])
    n = template.n_vertices

    bones = [Bone(id=i, name=b["name"], parent=b["parent"],
                  rest_rotation=np.array(b["rest_rotation"]),
                  rest_translation=np.array(b["rest_translation"]),
                  joint_anchor=np.array(b["joint_anchor"]))
             for i, b in enumerate(doc["bones"])]
    skeleton = Skeleton.from_chain_links(bones)

    w = np.zeros((len(bones), n))
    for b, v, value in doc["weights"]:
        w[int(b), int(v)] = float(value)

    names = [s["name"] for s in doc["blendshapes"]]
    if names:
        disp = np.stack([np.load(base / s["path"])
                         for s in doc["blendshapes"]])
    else:
        disp = np.zeros((0, n, 3))

    landmarks = [(d["name"], _anchor_from(d)) for d in doc["landmarks"]]
    patterns = [PatternCurve(name=p["name"],
                             anchors=[_anchor_from(a) for a in p["anchors"]],
                             oriented=bool(p.get("oriented", False)))
                for p in doc["patterns"]]

    return DeformableModel(template=template, skeleton=skeleton,
                           weights=BlendWeights(w),
                           blendshapes=BlendshapeSet(disp, names),
                           landmarks=landmarks, patterns=patterns)


# ---------------------------------------------------------------------------
# Ground-truth sidecar and target bundle
# ---------------------------------------------------------------------------

def save_ground_truth(target, path):
    """Sidecar with the sampled parameters and landmarks of a target."""
    doc = {
        "version": SIDECAR_VERSION,
        "seed": int(target.seed),
        "noise_sigma": float(target.noise_sigma),
        "hole_fraction": float(target.hole_fraction),
        "pose": pose_to_dict(target.pose),
        "alpha": [float(a) for a in target.alpha],
        "landmark_names": list(target.landmark_names),
        "scan_landmarks": [[float(x) for x in p]
                           for p in target.scan_landmarks],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return Path(path)


def load_ground_truth(path):
    """Sidecar contents as a dict with pose/alpha/landmarks materialized."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"ground-truth sidecar not found: {path}")
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != SIDECAR_VERSION:
        raise ManifestError(f"unsupported sidecar version "
                            f"{doc.get('version')!r}")
    doc["pose"] = pose_from_dict(doc["pose"])
    doc["alpha"] = np.array(doc["alpha"], dtype=np.float64)
    doc["scan_landmarks"] = np.array(doc["scan_landmarks"], dtype=np.float64)
    return doc


def pose_to_dict(pose: PoseParams):
    return {"rotations": pose.rotations.tolist(),
            "scales": pose.scales.tolist(),
            "translations": pose.translations.tolist()}


def pose_from_dict(d) -> PoseParams:
    return PoseParams(rotations=np.array(d["rotations"]),
                      scales=np.array(d["scales"]),
                      translations=np.array(d["translations"]))


def save_target(target, directory):
    """Write scan + clean scan meshes and the ground-truth sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(target.scan, directory / "scan.obj")
    save_mesh(target.clean_scan, directory / "clean_scan.obj")
    save_ground_truth(target, directory / "ground_truth.json")
    np.savetxt(directory / "scan_landmarks.csv", target.scan_landmarks,
               delimiter=",", header="x,y,z", comments="",
               fmt="%.12g")
    return directory


def load_landmarks_csv(path):
    """Scan landmark positions from a CSV with columns x,y,z (header row)."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"landmark file not found: {path}")
    pts = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64,
                     ndmin=2)
    if pts.shape[1] != 3:
        raise ManifestError("landmark CSV must have 3 columns (x,y,z)")
    return pts
