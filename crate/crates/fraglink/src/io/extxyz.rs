//! Extended-XYZ records with role flags.
//!
//! Format, per record:
//!
//! ```text
//! <atom count>
//! id=<id> [key=value ...]
//! <element> <x> <y> <z> <frag> <anchor> <pocket> <linker>
//! ```
//!
//! Coordinates are printed with 6 decimals; flags are 0/1 and exactly one of
//! frag/pocket/linker is set per atom. Metadata keys other than `id` are kept
//! sorted so writes are byte-stable.

use std::collections::BTreeMap;

use crate::error::{FraglinkError, Result};
use crate::geometry::{AtomRole, PointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecordMeta {
    pub id: String,
    pub extra: BTreeMap<String, String>,
}

impl RecordMeta {
    pub fn new(id: impl Into<String>) -> Self {
        RecordMeta { id: id.into(), extra: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XyzRecord {
    pub meta: RecordMeta,
    pub cloud: PointCloud,
}

fn parse_flag(token: &str, line: usize) -> Result<bool> {
    match token {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(FraglinkError::Parse {
            line,
            message: format!("flag must be 0 or 1, got {token:?}"),
        }),
    }
}

/// Parse a whole file of records. An empty (or whitespace-only) input yields
/// an empty list.
pub fn parse_extxyz(text: &str) -> Result<Vec<XyzRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut cursor = 0usize;
    while cursor < lines.len() {
        if lines[cursor].trim().is_empty() {
            cursor += 1;
            continue;
        }
        let count_line = cursor + 1;
        let count: usize = lines[cursor].trim().parse().map_err(|_| FraglinkError::Parse {
            line: count_line,
            message: format!("expected atom count, got {:?}", lines[cursor]),
        })?;
        if count == 0 {
            return Err(FraglinkError::Parse {
                line: count_line,
                message: "record must contain at least one atom".into(),
            });
        }
        let meta_line = cursor + 1;
        if meta_line >= lines.len() {
            return Err(FraglinkError::Parse {
                line: meta_line + 1,
                message: "missing metadata line".into(),
            });
        }
        let mut meta = RecordMeta::default();
        for token in lines[meta_line].split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| FraglinkError::Parse {
                line: meta_line + 1,
                message: format!("metadata token {token:?} is not key=value"),
            })?;
            if key == "id" {
                meta.id = value.to_string();
            } else {
                meta.extra.insert(key.to_string(), value.to_string());
            }
        }
        if meta.id.is_empty() {
            return Err(FraglinkError::Parse {
                line: meta_line + 1,
                message: "record metadata must contain id=<id>".into(),
            });
        }

        let mut elements = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(count);
        let mut roles = Vec::with_capacity(count);
        let mut anchors = Vec::with_capacity(count);
        for k in 0..count {
            let line_idx = meta_line + 1 + k;
            let line_no = line_idx + 1;
            let line = lines.get(line_idx).ok_or_else(|| FraglinkError::Parse {
                line: line_no,
                message: "unexpected end of file inside record".into(),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(FraglinkError::Parse {
                    line: line_no,
                    message: format!(
                        "expected 'element x y z frag anchor pocket linker', got {} fields",
                        fields.len()
                    ),
                });
            }
            let coord = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| FraglinkError::Parse {
                    line: line_no,
                    message: format!("bad coordinate {s:?}"),
                })?;
                if !v.is_finite() {
                    return Err(FraglinkError::Parse {
                        line: line_no,
                        message: format!("non-finite coordinate {s:?}"),
                    });
                }
                Ok(v)
            };
            elements.push(fields[0].to_string());
            coords.push(Vec3::new(coord(fields[1])?, coord(fields[2])?, coord(fields[3])?));
            let frag = parse_flag(fields[4], line_no)?;
            let anchor = parse_flag(fields[5], line_no)?;
            let pocket = parse_flag(fields[6], line_no)?;
            let linker = parse_flag(fields[7], line_no)?;
            let role = match (frag, pocket, linker) {
                (true, false, false) => AtomRole::Fragment,
                (false, true, false) => AtomRole::Pocket,
                (false, false, true) => AtomRole::Linker,
                _ => {
                    return Err(FraglinkError::Parse {
                        line: line_no,
                        message: "exactly one of frag/pocket/linker must be 1".into(),
                    })
                }
            };
            roles.push(role);
            anchors.push(anchor);
        }
        let cloud = PointCloud::new(elements, coords, vec![vec![]; count], roles, anchors)
            .map_err(|e| FraglinkError::Parse {
                line: count_line,
                message: format!("invalid record: {e}"),
            })?;
        records.push(XyzRecord { meta, cloud });
        cursor = meta_line + 1 + count;
    }
    Ok(records)
}

/// Serialize records; exact inverse of [`parse_extxyz`] up to the 6-decimal
/// coordinate quantization.
pub fn write_extxyz(records: &[XyzRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format!("{}\n", rec.cloud.len()));
        out.push_str(&format!("id={}", rec.meta.id));
        for (k, v) in &rec.meta.extra {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
        for i in 0..rec.cloud.len() {
            let c = rec.cloud.coords[i];
            let role = rec.cloud.roles[i];
            out.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {} {} {} {}\n",
                rec.cloud.elements[i],
                c.x,
                c.y,
                c.z,
                u8::from(role == AtomRole::Fragment),
                u8::from(rec.cloud.anchors[i]),
                u8::from(role == AtomRole::Pocket),
                u8::from(role == AtomRole::Linker),
            ));
        }
    }
    out
}
