//! Dataset container format.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CORLIMGS"
//! version u32      1
//! images  u32
//! h, w, channels, class_count   u32 each
//! per class: name_len u16, name bytes, split tag u8 (0 train, 1 val, 2 test)
//! per image: class id u16, h*w*channels pixel bytes (row-major,
//!            channel-interleaved)
//! crc     u64      CRC-64/ECMA-182 of every preceding byte
//! ```

use std::path::Path;

use crate::checkpoint::{crc64, Reader};
use crate::error::{Error, Result};

use super::{ClassInfo, Image, LabeledDataset, Split};

pub const MAGIC: &[u8; 8] = b"CORLIMGS";
pub const VERSION: u32 = 1;

pub fn dataset_to_bytes(dataset: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.h as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.w as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.channels as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.classes.len() as u32).to_le_bytes());
    for class in &dataset.classes {
        let name = class.name.as_bytes();
        assert!(name.len() <= u16::MAX as usize, "class name too long");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(class.split as u8);
    }
    for (image, &label) in dataset.images.iter().zip(dataset.labels.iter()) {
        out.extend_from_slice(&(label as u16).to_le_bytes());
        out.extend_from_slice(&image.pixels);
    }
    let crc = crc64(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad dataset magic {magic:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported dataset version {version}"),
        });
    }
    let image_count = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::Format {
            offset: 16,
            detail: format!("degenerate image dims {h}x{w}x{channels}"),
        });
    }

    let mut classes = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let name_len = r.u16()? as usize;
        let name_off = r.offset;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format {
                offset: name_off as u64,
                detail: format!("class name is not UTF-8: {e}"),
            })?
            .to_string();
        let tag_off = r.offset;
        let tag = r.u8()?;
        let split = Split::from_tag(tag).ok_or_else(|| Error::Format {
            offset: tag_off as u64,
            detail: format!("invalid split tag {tag} for class '{name}'"),
        })?;
        // Class identity is the name; a second entry would place one class
        // in two splits.
        if let Some(dup) = classes.iter().find(|c: &&ClassInfo| c.name == name) {
            return Err(Error::Format {
                offset: name_off as u64,
                detail: format!(
                    "class '{name}' listed twice (splits {:?} and {split:?}); splits must be class-disjoint",
                    dup.split
                ),
            });
        }
        classes.push(ClassInfo { name, split });
    }

    let pixel_len = h * w * channels;
    let mut images = Vec::with_capacity(image_count);
    let mut labels = Vec::with_capacity(image_count);
    for _ in 0..image_count {
        let label_off = r.offset;
        let label = r.u16()? as usize;
        if label >= class_count {
            return Err(Error::Format {
                offset: label_off as u64,
                detail: format!("class id {label} out of range ({class_count} classes)"),
            });
        }
        let pixels = r.take(pixel_len)?.to_vec();
        images.push(Image::new(h, w, channels, pixels));
        labels.push(label);
    }

    let body_end = r.offset;
    let stored = r.u64()?;
    let computed = crc64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Format {
            offset: body_end as u64,
            detail: format!("CRC mismatch: stored {stored:#018x}, computed {computed:#018x}"),
        });
    }
    if r.offset != bytes.len() {
        return Err(Error::Format {
            offset: r.offset as u64,
            detail: format!("{} trailing bytes after CRC", bytes.len() - r.offset),
        });
    }

    LabeledDataset::new(classes, images, labels, h, w, channels).map_err(|e| Error::Format {
        offset: 0,
        detail: e.to_string(),
    })
}

pub fn save_dataset(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, dataset_to_bytes(dataset))?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::synth::{generate_synthetic, SynthSpec};

    fn sample() -> LabeledDataset {
        generate_synthetic(&SynthSpec {
            canvas: 16,
            parts_per_class: 1,
            train_classes: 2,
            test_classes: 1,
            images_per_class: 3,
            jitter: 1,
            ..SynthSpec::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn round_trip_preserves_bytes_and_content() {
        let ds = sample();
        let bytes = dataset_to_bytes(&ds);
        let loaded = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(dataset_to_bytes(&loaded), bytes);
    }

    #[test]
    fn truncation_is_a_format_error_without_partial_data() {
        let bytes = dataset_to_bytes(&sample());
        for cut in [5usize, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = dataset_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn duplicate_class_entry_is_a_split_disjointness_error() {
        // Craft a file whose class table lists "dup" under two splits.
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes()); // images
        for d in [2u32, 2, 1, 2] {
            out.extend_from_slice(&d.to_le_bytes()); // h, w, channels, classes
        }
        for tag in [0u8, 2u8] {
            out.extend_from_slice(&3u16.to_le_bytes());
            out.extend_from_slice(b"dup");
            out.push(tag);
        }
        let crc = crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        let err = dataset_from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("class-disjoint"), "{err}");
    }

    #[test]
    fn corrupted_pixels_fail_the_crc() {
        let mut bytes = dataset_to_bytes(&sample());
        let n = bytes.len();
        bytes[n - 20] ^= 0x55;
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
    }

    #[test]
    fn invalid_split_tag_is_rejected_with_offset() {
        let ds = sample();
        let mut bytes = dataset_to_bytes(&ds);
        // First class entry: tag byte sits after header (28) + name_len (2)
        // + name bytes.
        let tag_offset = 28 + 2 + ds.classes[0].name.len();
        bytes[tag_offset] = 9;
        let err = dataset_from_bytes(&bytes).unwrap_err();
        match err {
            Error::Format { offset, detail } => {
                assert_eq!(offset as usize, tag_offset);
                assert!(detail.contains("split tag"), "{detail}");
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
