use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;

pub const CLASS_NAMES: [&str; 2] = ["ship", "vehicle"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

pub fn class_name(id: usize) -> Option<&'static str> {
    CLASS_NAMES.get(id).copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub rbox: RotatedBox,
}

/// Lines of `image_id cx cy w h theta_radians class_name`; blank lines and
/// `#` comments are skipped.
pub fn parse_annotations_str(text: &str, context: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::format(format!("{context}:{}", i + 1), msg);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let mut nums = [0.0; 5];
        for (k, s) in f[1..6].iter().enumerate() {
            nums[k] = s.parse().map_err(|_| err(format!("bad number {s:?}")))?;
        }
        let class = class_id(f[6]).ok_or_else(|| err(format!("unknown class {:?}", f[6])))?;
        let rbox =
            RotatedBox::new(nums[0], nums[1], nums[2], nums[3], nums[4], class).map_err(|e| err(e.to_string()))?;
        out.push(Annotation {
            image_id: f[0].to_string(),
            rbox,
        });
    }
    Ok(out)
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_annotations_str(&text, &path.display().to_string())
}

/// Inverse of [`parse_annotations_str`]; numbers use shortest round-trip form.
pub fn format_annotations(items: &[Annotation]) -> Result<String> {
    let mut s = String::new();
    for a in items {
        let b = &a.rbox;
        if a.image_id.is_empty() || a.image_id.contains(char::is_whitespace) || a.image_id.contains('#') {
            return Err(Error::format(
                "annotations",
                format!("unwritable image id {:?}", a.image_id),
            ));
        }
        let name = class_name(b.class_id)
            .ok_or_else(|| Error::format("annotations", format!("unknown class id {}", b.class_id)))?;
        writeln!(
            s,
            "{} {:?} {:?} {:?} {:?} {:?} {name}",
            a.image_id, b.cx, b.cy, b.w, b.h, b.theta
        )
        .expect("string write");
    }
    Ok(s)
}
