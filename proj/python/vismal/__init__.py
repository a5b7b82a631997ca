"""Malware binaries as grayscale images: conversion, CLAHE enhancement and a CNN classifier."""

from ._core import (
    ClaheParams,
    ClipLimitMode,
    ClipMode,
    ConfigError,
    EmptyDataset,
    EmptyInput,
    FormatError,
    ImageTooSmall,
    IoError,
    LabelError,
    Model,
    NumericsError,
    ShapeError,
    VismalError,
    classify_file,
    convert_bytes,
    decode_png,
    encode_png,
    enhance,
    equalize,
    family_metrics,
    load_model,
    measure_mpe,
    region_mappings,
    resize,
    select_width,
    stratified_folds,
    train_directory,
    weighted_report,
    write_toy_corpus,
)

__version__ = "0.1.0"
