//! rseg: a region-based multi-task segmentation pipeline built from scratch.
//!
//! The crate trains and evaluates two single-object segmentation networks on
//! synthetic pelvis-like radiographs:
//!
//! * a scaled-down Mask R-CNN: FPN backbone, region proposal network,
//!   RoIAlign, and box/mask prediction heads, trained jointly;
//! * a U-Net baseline with the classic encoder-decoder skip layout.
//!
//! Everything runs on the in-crate tape autodiff core ([`tensor`]) — no
//! external ML framework. Detection geometry ([`geometry`]), joint
//! image/mask augmentation ([`augment`]), dataset synthesis and file formats
//! ([`data`]), evaluation metrics ([`metrics`]) and the training harness
//! ([`train`]) are each small, independently tested modules.
//!
//! The `rseg` binary exposes the full workflow:
//! `gen-data`, `pretrain`, `train`, `eval`, `predict`, `compare`, `gradcheck`.
//! The accompanying guide under `book/` walks through each subsystem; its
//! code snippets compile as doctests via [`book`].

pub mod geometry;
pub mod tensor;
