"""End-to-end orchestration: data preparation, training, prediction.

The prediction path runs load -> segment (720x480 bone image) ->
prepare (720x960) -> localize -> crop -> estimate age. The
localization stage is teacher-forced: exact phantom masks and boxes
are pushed through the same geometric chain the predictor uses. The
age stage instead crops from the *trained segmenter's* bone output
(with the true boxes lightly perturbed), because its regression is
sensitive to the faint background halo a learned mask leaves around
the bone — ground-truth crops would train it on pixels it never sees
at prediction time.
"""

from __future__ import annotations

import numpy as np

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from .age_estimation import (
    AgeModel,
    AtlasEntry,
    ReferenceAtlas,
    build_age_model,
    default_atlas_classes,
    estimate_age,
    load_atlas,
    save_atlas,
    train_age,
)
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import PipelineConfig
from .errors import BoneAgeError, StartupError
from .imaging import GrayImage, load_image, resize_bilinear, save_image
from .optim import OptimizerConfig
from .phantom import PhantomSample, PhantomSpec, generate_dataset, generate_phantom
from .roi import (
    PREPARED_HEIGHT,
    PREPARED_WIDTH,
    RAW_HEIGHT,
    RAW_WIDTH,
    RoiBox,
    RoiModel,
    build_rpn,
    crop_roi,
    predict_roi,
    prepare_roi_input,
    train_roi,
    transform_box_to_prepared,
)
from .segmentation import SegmentationModel, build_unet, segment, train_segmentation

LogFn = Optional[Callable[[str], None]]


@dataclass
class PredictionRecord:
    """One pipeline output: `image_path age_months nearest_class confidence`."""

    image_path: str
    age_months: float
    nearest_class: int
    confidence: float
    low_confidence: bool

    def format_line(self) -> str:
        line = (
            f"{self.image_path} {self.age_months:.1f} "
            f"{self.nearest_class} {self.confidence:.4f}"
        )
        if self.low_confidence:
            line += " low_confidence"
        return line


@contextmanager
def _stage(label: str):
    """Prefix any pipeline error with the stage that raised it."""
    try:
        yield
    except BoneAgeError as exc:
        raise type(exc)(f"{label}: {exc}") from exc


# ---------------------------------------------------------------------------
# training data preparation
# ---------------------------------------------------------------------------

def masked_bone_image(sample: PhantomSample) -> GrayImage:
    """Ground-truth bone image: phantom pixels kept where the mask fires."""
    return GrayImage(sample.image.pixels * sample.bone_mask.pixels)


def segmentation_data(samples: Sequence[PhantomSample]) -> List[Tuple[GrayImage, GrayImage]]:
    """(image, binary mask) pairs for the segmentation trainer."""
    return [(s.image, s.bone_mask) for s in samples]


def roi_data(
    samples: Sequence[PhantomSample], net_size: Tuple[int, int]
) -> List[Tuple[GrayImage, RoiBox, bool]]:
    """(net-size image, net-scale box, is_true) for the localization trainer.

    Each phantom's ground-truth bone image runs through the real
    geometric chain (720x480 -> rotate -> 720x960 -> net size), and its
    box is carried through the same transforms.
    """
    net_w, net_h = net_size
    out = []
    for s in samples:
        bone = resize_bilinear(masked_bone_image(s), RAW_WIDTH, RAW_HEIGHT)
        prepared = prepare_roi_input(bone)
        small = resize_bilinear(prepared, net_w, net_h)
        box = _prepared_box(s)
        out.append((small, box.scaled(net_w / PREPARED_WIDTH, net_h / PREPARED_HEIGHT), s.is_true))
    return out


def _prepared_box(s: PhantomSample) -> RoiBox:
    """Ground-truth box carried to 720x960 prepared coordinates."""
    raw = s.roi.scaled(RAW_WIDTH / s.image.width, RAW_HEIGHT / s.image.height)
    return transform_box_to_prepared(raw)


def age_crop(sample: PhantomSample, crop_size: Tuple[int, int]) -> GrayImage:
    """Joint crop from the exact mask and box (used for atlas exemplars)."""
    bone = resize_bilinear(masked_bone_image(sample), RAW_WIDTH, RAW_HEIGHT)
    prepared = prepare_roi_input(bone)
    return crop_roi(prepared, _prepared_box(sample), crop_size[0], crop_size[1])


def age_data(
    samples: Sequence[PhantomSample], atlas: ReferenceAtlas, crop_size: Tuple[int, int]
) -> List[Tuple[GrayImage, float, int]]:
    """(crop, age_months, class index) triples from true phantoms only."""
    out = []
    for s in samples:
        if not s.is_true:
            continue
        out.append(
            (age_crop(s, crop_size), s.age_months, atlas.class_of(s.sex, s.age_months))
        )
    return out


def _jitter_box(box: RoiBox, rng: np.random.Generator) -> RoiBox:
    """Perturb a box the way the localizer tends to miss: a little
    off-center and somewhat too large or too small."""
    w = box.w * float(rng.uniform(0.85, 1.25))
    h = box.h * float(rng.uniform(0.85, 1.25))
    cx = box.x + box.w / 2.0 + float(rng.uniform(-0.08, 0.08)) * box.w
    cy = box.y + box.h / 2.0 + float(rng.uniform(-0.08, 0.08)) * box.h
    x = min(max(cx - w / 2.0, 0.0), PREPARED_WIDTH - w)
    y = min(max(cy - h / 2.0, 0.0), PREPARED_HEIGHT - h)
    return RoiBox(x=x, y=y, w=w, h=h)


def deployed_age_crop(
    seg_model: SegmentationModel,
    sample: PhantomSample,
    crop_size: Tuple[int, int],
    box: Optional[RoiBox] = None,
) -> GrayImage:
    """Joint crop exactly as prediction produces it: the image is
    masked by the trained segmenter before the geometric chain."""
    _, bone = segment(seg_model, sample.image)
    prepared = prepare_roi_input(bone)
    target = box if box is not None else _prepared_box(sample)
    return crop_roi(prepared, target, crop_size[0], crop_size[1])


def age_data_deployed(
    samples: Sequence[PhantomSample],
    atlas: ReferenceAtlas,
    crop_size: Tuple[int, int],
    seg_model: SegmentationModel,
    seed: int = 0,
) -> List[Tuple[GrayImage, float, int]]:
    """Age-training triples cropped from the trained segmenter's output.

    Every other sample uses a perturbed box instead of the true one, so
    the regressor also tolerates localization error.
    """
    rng = np.random.default_rng(seed)
    out = []
    kept = 0
    for s in samples:
        if not s.is_true:
            continue
        base = _prepared_box(s)
        box = base if kept % 2 == 0 else _jitter_box(base, rng)
        kept += 1
        out.append(
            (
                deployed_age_crop(seg_model, s, crop_size, box=box),
                s.age_months,
                atlas.class_of(s.sex, s.age_months),
            )
        )
    return out


def build_phantom_atlas(
    config: PipelineConfig, seed_offset: int = 900_000
) -> ReferenceAtlas:
    """Render one exemplar crop per (sex, age) class from noiseless phantoms."""
    entries = []
    for class_id, (sex, age) in enumerate(default_atlas_classes()):
        spec = PhantomSpec(
            seed=config.seed + seed_offset + class_id,
            maturity=(age - 120.0) / 60.0,
            sex=sex,
            image_size=config.phantom.image_size,
            noise_level=0.0,
        )
        sample = generate_phantom(spec)
        entries.append(
            AtlasEntry(sex=sex, age_months=age, image=age_crop(sample, config.age.input_size))
        )
    return ReferenceAtlas(entries=entries)


# ---------------------------------------------------------------------------
# training orchestration
# ---------------------------------------------------------------------------

def training_phantoms(config: PipelineConfig, count: Optional[int] = None) -> List[PhantomSample]:
    return generate_dataset(
        count or config.phantom.train_count,
        seed=config.seed,
        negative_fraction=config.phantom.negative_fraction,
        image_size=config.phantom.image_size,
        noise_level=config.phantom.noise_level,
    )


def holdout_phantoms(config: PipelineConfig, count: Optional[int] = None) -> List[PhantomSample]:
    # disjoint master seed stream from training
    return generate_dataset(
        count or config.phantom.holdout_count,
        seed=config.seed + 10_000,
        negative_fraction=config.phantom.negative_fraction,
        image_size=config.phantom.image_size,
        noise_level=config.phantom.noise_level,
    )


def train_segmentation_stage(
    config: PipelineConfig, samples: Optional[Sequence[PhantomSample]] = None, log_fn: LogFn = None
) -> Tuple[SegmentationModel, List[float]]:
    samples = samples if samples is not None else training_phantoms(config)
    model = build_unet(config.unet, seed=config.seed)
    opt = OptimizerConfig(
        kind="adaptive",
        learning_rate=config.seg_train.learning_rate,
        batch_size=config.seg_train.batch_size,
    )
    model, history = train_segmentation(
        model,
        segmentation_data(samples),
        epochs=config.seg_train.epochs,
        optimizer=opt,
        seed=config.seed,
        log_fn=log_fn,
    )
    config.seg_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(config.seg_checkpoint, model.params)
    return model, history


def train_roi_stage(
    config: PipelineConfig, samples: Optional[Sequence[PhantomSample]] = None, log_fn: LogFn = None
) -> Tuple[RoiModel, List[float]]:
    samples = samples if samples is not None else training_phantoms(config)
    model = build_rpn(config.rpn, seed=config.seed)
    opt = OptimizerConfig(
        kind="adaptive",
        learning_rate=config.roi_train.learning_rate,
        batch_size=config.roi_train.batch_size,
    )
    model, history = train_roi(
        model,
        roi_data(samples, config.rpn.input_size),
        epochs=config.roi_train.epochs,
        optimizer=opt,
        seed=config.seed,
        log_fn=log_fn,
    )
    config.roi_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(config.roi_checkpoint, model.params)
    return model, history


def train_age_stage(
    config: PipelineConfig,
    samples: Optional[Sequence[PhantomSample]] = None,
    log_fn: LogFn = None,
    seg_model: Optional[SegmentationModel] = None,
) -> Tuple[AgeModel, ReferenceAtlas, List[float]]:
    """Train the age network on crops from the trained segmenter.

    Requires the segmentation checkpoint (or a seg_model passed in),
    since the age network must see segmenter-masked crops.
    """
    samples = samples if samples is not None else training_phantoms(config)
    if seg_model is None:
        if not Path(config.seg_checkpoint).is_file():
            raise StartupError(
                f"segmentation: checkpoint missing at {config.seg_checkpoint} "
                "(train the segmenter first)"
            )
        seg_model = build_unet(config.unet, seed=config.seed)
        restore_params(
            seg_model.params, load_checkpoint(config.seg_checkpoint), str(config.seg_checkpoint)
        )
    atlas = build_phantom_atlas(config)
    model = build_age_model(config.age, seed=config.seed)
    opt = OptimizerConfig(
        kind="adaptive",
        learning_rate=config.age_train.learning_rate,
        batch_size=config.age_train.batch_size,
    )
    model, history = train_age(
        model,
        age_data_deployed(samples, atlas, config.age.input_size, seg_model, seed=config.seed),
        epochs=config.age_train.epochs,
        optimizer=opt,
        seed=config.seed,
        log_fn=log_fn,
    )
    config.age_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(config.age_checkpoint, model.params)
    save_atlas(atlas, config.atlas_manifest)
    return model, atlas, history


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

class Pipeline:
    """Loaded models plus the atlas; runs the full prediction chain."""

    def __init__(
        self,
        config: PipelineConfig,
        seg_model: SegmentationModel,
        roi_model: RoiModel,
        age_model: AgeModel,
        atlas: ReferenceAtlas,
    ):
        self.config = config
        self.seg_model = seg_model
        self.roi_model = roi_model
        self.age_model = age_model
        self.atlas = atlas

    @classmethod
    def load(cls, config: PipelineConfig) -> "Pipeline":
        """Build models from config geometry and restore checkpoints."""
        stages = [
            ("segmentation", config.seg_checkpoint),
            ("localization", config.roi_checkpoint),
            ("age", config.age_checkpoint),
        ]
        for stage_name, path in stages:
            if not Path(path).is_file():
                raise StartupError(f"{stage_name}: checkpoint missing at {path}")
        if not Path(config.atlas_manifest).is_file():
            raise StartupError(f"age: atlas manifest missing at {config.atlas_manifest}")

        seg_model = build_unet(config.unet, seed=config.seed)
        with _stage("segmentation"):
            restore_params(
                seg_model.params, load_checkpoint(config.seg_checkpoint), str(config.seg_checkpoint)
            )
        roi_model = build_rpn(config.rpn, seed=config.seed)
        with _stage("localization"):
            restore_params(
                roi_model.params, load_checkpoint(config.roi_checkpoint), str(config.roi_checkpoint)
            )
        age_model = build_age_model(config.age, seed=config.seed)
        with _stage("age"):
            restore_params(
                age_model.params, load_checkpoint(config.age_checkpoint), str(config.age_checkpoint)
            )
            atlas = load_atlas(config.atlas_manifest)
        return cls(config, seg_model, roi_model, age_model, atlas)

    def predict_image(
        self, img: GrayImage, image_path: str = "<memory>", dump_dir: Optional[Path] = None
    ) -> PredictionRecord:
        """Run the staged chain on an already-loaded image."""
        with _stage("segment"):
            mask, bone = segment(self.seg_model, img)
        with _stage("prepare"):
            prepared = prepare_roi_input(bone)
        with _stage("localize"):
            box, confidence = predict_roi(self.roi_model, prepared)
        with _stage("crop"):
            crop = crop_roi(
                prepared, box, self.config.age.input_size[0], self.config.age.input_size[1]
            )
        with _stage("age"):
            estimate = estimate_age(self.age_model, crop, self.atlas)
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            save_image(mask, dump_dir / "mask.pgm")
            save_image(bone, dump_dir / "bone.pgm")
            save_image(prepared, dump_dir / "prepared.pgm")
            save_image(crop, dump_dir / "crop.pgm")
        return PredictionRecord(
            image_path=image_path,
            age_months=estimate.age_months,
            nearest_class=estimate.nearest_class,
            confidence=confidence,
            low_confidence=confidence < self.config.confidence_threshold,
        )

    def predict_path(self, image_path, dump_dir: Optional[Path] = None) -> PredictionRecord:
        with _stage("load"):
            img = load_image(image_path)
        return self.predict_image(img, image_path=str(image_path), dump_dir=dump_dir)


def run_pipeline(config: PipelineConfig, image_path, dump_dir: Optional[Path] = None) -> PredictionRecord:
    """Load checkpoints and predict one image (see Pipeline for reuse)."""
    return Pipeline.load(config).predict_path(image_path, dump_dir=dump_dir)


def estimate_from_sample(pipe: Pipeline, sample: PhantomSample) -> PredictionRecord:
    """Predict directly from an in-memory phantom sample."""
    return pipe.predict_image(sample.image, image_path="<phantom>")
