use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pointcloud::ColoredPointCloud;

/// Reads an ASCII PLY file with x, y, z and red, green, blue vertex
/// properties. Extra vertex properties are tolerated and ignored; elements
/// after the vertex element (faces, edges) are skipped.
///
/// The returned cloud is un-normalized with colors in [0, 255].
pub fn load_ply(path: impl AsRef<Path>) -> Result<ColoredPointCloud> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut next_line = |ctx: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((idx, Ok(line))) => Ok((idx + 1, line)),
            Some((idx, Err(e))) => Err(Error::PlyParse {
                line: idx + 1,
                message: format!("read error: {e}"),
            }),
            None => Err(Error::PlyParse {
                line: 0,
                message: format!("unexpected end of file while {ctx}"),
            }),
        }
    };

    let (line_no, magic) = next_line("reading magic")?;
    if magic.trim() != "ply" {
        return Err(Error::PlyParse {
            line: line_no,
            message: format!("expected \"ply\" magic, got {:?}", magic.trim()),
        });
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut saw_format = false;
    let header_end_line;

    loop {
        let (line_no, line) = next_line("reading header")?;
        let line = line.trim().to_string();
        if line.is_empty() || line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(Error::PlyParse {
                        line: line_no,
                        message: format!("only ascii PLY is supported, got format {kind:?}"),
                    });
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tokens.next().unwrap_or("");
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::PlyParse {
                            line: line_no,
                            message: "duplicate vertex element".into(),
                        });
                    }
                    let count: usize =
                        tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| {
                            Error::PlyParse {
                                line: line_no,
                                message: "vertex element is missing a count".into(),
                            }
                        })?;
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(Error::PlyParse {
                            line: line_no,
                            message: format!(
                                "element {name:?} precedes the vertex element; only \
                                 vertex-first layouts are supported"
                            ),
                        });
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let name = tokens.clone().last().unwrap_or("");
                    if tokens.next() == Some("list") {
                        return Err(Error::PlyParse {
                            line: line_no,
                            message: "list properties are not supported on vertices".into(),
                        });
                    }
                    properties.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_end_line = line_no;
                break;
            }
            Some(other) => {
                return Err(Error::PlyParse {
                    line: line_no,
                    message: format!("unrecognized header keyword {other:?}"),
                });
            }
            None => unreachable!("blank lines are skipped"),
        }
    }

    if !saw_format {
        return Err(Error::PlyParse {
            line: header_end_line,
            message: "missing format line".into(),
        });
    }
    let vertex_count = vertex_count.ok_or(Error::PlyParse {
        line: header_end_line,
        message: "missing vertex element".into(),
    })?;
    if vertex_count == 0 {
        return Err(Error::PlyParse {
            line: header_end_line,
            message: "vertex element declares 0 vertices".into(),
        });
    }

    let field = |name: &str| -> Result<usize> {
        properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::PlyParse {
                line: header_end_line,
                message: format!("missing vertex property {name:?}"),
            })
    };
    let idx = [
        field("x")?,
        field("y")?,
        field("z")?,
        field("red")?,
        field("green")?,
        field("blue")?,
    ];

    let mut positions = Vec::with_capacity(vertex_count * 3);
    let mut colors = Vec::with_capacity(vertex_count * 3);
    let mut parsed = 0;
    while parsed < vertex_count {
        let (line_no, line) = match lines.next() {
            Some((i, Ok(l))) => (i + 1, l),
            Some((i, Err(e))) => {
                return Err(Error::PlyParse {
                    line: i + 1,
                    message: format!("read error: {e}"),
                })
            }
            None => {
                return Err(Error::PlyParse {
                    line: header_end_line + parsed + 1,
                    message: format!(
                        "header advertises {vertex_count} vertices but only {parsed} present"
                    ),
                })
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() < properties.len() {
            return Err(Error::PlyParse {
                line: line_no,
                message: format!(
                    "vertex line has {} values but {} properties are declared",
                    values.len(),
                    properties.len()
                ),
            });
        }
        let parse = |i: usize| -> Result<f64> {
            values[i].parse::<f64>().map_err(|_| Error::PlyParse {
                line: line_no,
                message: format!("cannot parse {:?} as a number", values[i]),
            })
        };
        for &i in &idx[..3] {
            positions.push(parse(i)?);
        }
        for &i in &idx[3..] {
            colors.push(parse(i)?);
        }
        parsed += 1;
    }

    let positions = Matrix::from_vec(vertex_count, 3, positions)?;
    let colors = Matrix::from_vec(vertex_count, 3, colors)?;
    ColoredPointCloud::new(positions, colors)
}

/// Writes an ASCII PLY file with float positions and 8-bit colors.
///
/// Positions are written with round-trip-exact f64 formatting. Colors are
/// quantized to u8: from [-1, 1] when the cloud is normalized, from [0, 1]
/// or [0, 255] (whichever the values fit) otherwise.
///
/// The file is written to a sibling temp path and renamed on success, so a
/// failed write never leaves a partial file at `path`.
pub fn save_ply(cloud: &ColoredPointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = sibling_tmp_path(path);
    let result = write_ply_contents(cloud, &tmp)
        .and_then(|()| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn sibling_tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_ply_contents(cloud: &ColoredPointCloud, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    writeln!(w, "ply").map_err(io_err)?;
    writeln!(w, "format ascii 1.0").map_err(io_err)?;
    writeln!(w, "element vertex {}", cloud.len()).map_err(io_err)?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}").map_err(io_err)?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}").map_err(io_err)?;
    }
    writeln!(w, "end_header").map_err(io_err)?;

    let quantize: Box<dyn Fn(f64) -> u8> = if cloud.is_normalized() {
        Box::new(|v: f64| (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8)
    } else if cloud.colors().data().iter().all(|&v| v <= 1.0) {
        Box::new(|v: f64| ((v * 255.0).round()).clamp(0.0, 255.0) as u8)
    } else {
        Box::new(|v: f64| (v.round()).clamp(0.0, 255.0) as u8)
    };

    for i in 0..cloud.len() {
        let p = cloud.positions().row(i);
        let c = cloud.colors().row(i);
        writeln!(
            w,
            "{} {} {} {} {} {}",
            p[0],
            p[1],
            p[2],
            quantize(c[0]),
            quantize(c[1]),
            quantize(c[2])
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100;
        let positions = Matrix::from_vec(
            n,
            3,
            (0..n * 3).map(|_| rng.random_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let colors = Matrix::from_vec(
            n,
            3,
            (0..n * 3).map(|_| rng.random_range(0.0..255.0)).collect(),
        )
        .unwrap();
        let cloud = ColoredPointCloud::new(positions, colors).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        save_ply(&cloud, &path).unwrap();
        let back = load_ply(&path).unwrap();

        assert_eq!(back.len(), n);
        assert!(back.positions().max_abs_diff(cloud.positions()) < 1e-6);
        // Colors are quantized to 8 bits on save.
        assert!(back.colors().max_abs_diff(cloud.colors()) <= 0.5);
    }

    #[test]
    fn zero_vertices_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n",
        )
        .unwrap();
        assert!(matches!(load_ply(&path), Err(Error::PlyParse { .. })));
    }

    #[test]
    fn count_mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n0 0 0 1 2 3\n1 0 0 4 5 6\n2 0 0 7 8 9\n3 0 0 1 1 1\n",
        )
        .unwrap();
        match load_ply(&path) {
            Err(Error::PlyParse { line, message }) => {
                assert!(message.contains("5 vertices"), "{message}");
                assert!(message.contains("4"), "{message}");
                assert!(line > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_color_property_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nocolor.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
             property float z\nend_header\n0 0 0\n",
        )
        .unwrap();
        match load_ply(&path) {
            Err(Error::PlyParse { message, .. }) => assert!(message.contains("red"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn extra_properties_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment exported scene\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n1 2 3 0.5 10 20 30\n4 5 6 0.5 40 50 60\n",
        )
        .unwrap();
        let cloud = load_ply(&path).unwrap();
        assert_eq!(cloud.positions().row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(cloud.colors().row(0), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn binary_format_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bin.ply");
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        match load_ply(&path) {
            Err(Error::PlyParse { message, .. }) => {
                assert!(message.contains("ascii"), "{message}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
