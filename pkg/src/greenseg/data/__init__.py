"""Slices, NIfTI I/O, preprocessing, phantoms and the batch loader."""
from .augment import apply_transform, augment
from .loader import Batch, DecodingDataset, Loader, LoaderConfig, LoaderError, make_loader
from .nifti import NiftiFormatError, UnsupportedDatatype, Volume, read_nifti, write_nifti
from .phantoms import generate_phantoms
from .preprocess import clean_pairs, extract_and_slice, load_directory, read_manifest, split_by_patient, write_manifest
from .types import SlicePair, normalize_minmax, stack_batch
