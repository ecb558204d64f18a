//! Triangle meshes and a minimal Wavefront OBJ reader.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    /// Indices into `vertices`; polygons are fan-triangulated on load.
    pub faces: Vec<[usize; 3]>,
    /// Optional per-face-corner texture coordinates.
    pub uvs: Option<Vec<[[f64; 2]; 3]>>,
}

impl TriangleMesh {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= v) {
                return Err(Error::Dataset(format!("face {fi} references vertex out of range")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Dataset(format!("face {fi} has repeated vertices")));
            }
        }
        if let Some(uvs) = &self.uvs {
            if uvs.len() != self.faces.len() {
                return Err(Error::Dataset("uv count does not match face count".into()));
            }
        }
        Ok(())
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let [a, b, c] = self.faces[fi];
        let va = Vector3::from(self.vertices[a]);
        let vb = Vector3::from(self.vertices[b]);
        let vc = Vector3::from(self.vertices[c]);
        0.5 * (vb - va).cross(&(vc - va)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut vertices: Vec<[f64; 3]> = Vec::new();
        let mut vts: Vec<[f64; 2]> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();
        let mut face_uvs: Vec<[[f64; 2]; 3]> = Vec::new();
        let mut any_uv = false;

        let err = |line: usize, msg: &str| Error::ObjParse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };

        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let ln = ln + 1;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut p = [0.0; 3];
                    for slot in &mut p {
                        *slot = it
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err(ln, "bad vertex"))?;
                    }
                    vertices.push(p);
                }
                Some("vt") => {
                    let mut p = [0.0; 2];
                    for slot in &mut p {
                        *slot = it
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err(ln, "bad texcoord"))?;
                    }
                    vts.push(p);
                }
                Some("f") => {
                    let mut corners: Vec<(usize, Option<usize>)> = Vec::new();
                    for tok in it {
                        let mut parts = tok.split('/');
                        let vi: isize = parts
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err(ln, "bad face index"))?;
                        let vi = resolve_index(vi, vertices.len())
                            .ok_or_else(|| err(ln, "face index out of range"))?;
                        let ti = match parts.next() {
                            Some("") | None => None,
                            Some(t) => {
                                let t: isize =
                                    t.parse().map_err(|_| err(ln, "bad texcoord index"))?;
                                Some(
                                    resolve_index(t, vts.len())
                                        .ok_or_else(|| err(ln, "texcoord index out of range"))?,
                                )
                            }
                        };
                        corners.push((vi, ti));
                    }
                    if corners.len() < 3 {
                        return Err(err(ln, "face with fewer than 3 corners"));
                    }
                    for k in 1..corners.len() - 1 {
                        let tri = [corners[0], corners[k], corners[k + 1]];
                        faces.push([tri[0].0, tri[1].0, tri[2].0]);
                        if tri.iter().all(|(_, t)| t.is_some()) {
                            any_uv = true;
                            face_uvs.push([
                                vts[tri[0].1.unwrap()],
                                vts[tri[1].1.unwrap()],
                                vts[tri[2].1.unwrap()],
                            ]);
                        } else {
                            face_uvs.push([[0.0, 0.0]; 3]);
                        }
                    }
                }
                _ => {}
            }
        }
        let mesh = TriangleMesh {
            vertices,
            faces,
            uvs: if any_uv { Some(face_uvs) } else { None },
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for v in &self.vertices {
            writeln!(f, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for face in &self.faces {
            writeln!(f, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1)?;
        }
        Ok(())
    }
}

fn resolve_index(i: isize, len: usize) -> Option<usize> {
    if i > 0 {
        let i = (i - 1) as usize;
        (i < len).then_some(i)
    } else if i < 0 {
        let back = (-i) as usize;
        len.checked_sub(back)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_round_trip_with_quads() {
        let dir = std::env::temp_dir().join("stylesplat_mesh_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("quad.obj");
        std::fs::write(
            &path,
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n",
        )
        .unwrap();
        let mesh = TriangleMesh::load_obj(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.faces.len(), 2);
        assert!(mesh.uvs.is_some());
        assert!((mesh.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_face() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 5]],
            uvs: None,
        };
        assert!(mesh.validate().is_err());
    }
}
