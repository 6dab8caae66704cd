import os

# Single-threaded BLAS before numpy loads: heavy tests parallelize across
# processes, and the per-op matrices here are too small to gain from threads.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest

from ricekit.phantom import PhantomConfig, generate_cohort
from ricekit.preprocess import preprocess_cohort
from ricekit.manifest import load_manifest
from ricekit.sampling import make_folds, save_folds


def micro_phantom_config(seed: int = 11) -> PhantomConfig:
    """24^3 configuration: fast to generate, big enough for a 5-level net."""
    return PhantomConfig(
        grid_shape=(24, 24, 24),
        brain_semi_axes_vox=(9.0, 8.5, 8.0),
        cavity_radius_vox=(1.5, 2.2),
        lesion_radius_vox=(1.2, 2.0),
        lesion_annulus_vox=2.0,
        dose_sigma_vox=(5.0, 6.5),
        dose_anisotropy=(0.85, 1.2),
        texture_grid_vox=6,
        seed=seed,
    )


@pytest.fixture(scope="session")
def micro_cohort(tmp_path_factory):
    """Tiny generated + preprocessed cohort shared (read-only) across tests."""
    root = tmp_path_factory.mktemp("micro_cohort")
    cohort_dir = root / "cohort"
    prep_dir = root / "prep"
    generate_cohort(micro_phantom_config(), 8, 7, 2, 2, out_dir=cohort_dir)
    manifest_path = preprocess_cohort(str(cohort_dir / "manifest.json"),
                                      str(cohort_dir), str(prep_dir))
    manifest = load_manifest(manifest_path)
    folds_path = root / "folds.json"
    save_folds(make_folds(manifest, seed=0), folds_path)
    return {
        "root": root,
        "cohort_dir": str(cohort_dir),
        "prep_dir": str(prep_dir),
        "manifest_path": manifest_path,
        "manifest": manifest,
        "folds_path": str(folds_path),
    }
