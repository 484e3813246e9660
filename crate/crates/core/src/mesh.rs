//! Structured interval and rectangle meshes with a Dirichlet/Neumann
//! partition of the boundary.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        Some(match s.trim() {
            "left" => Side::Left,
            "right" => Side::Right,
            "bottom" => Side::Bottom,
            "top" => Side::Top,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFace {
    pub nodes: Vec<usize>,
    pub side: Side,
    pub tag: BoundaryTag,
    /// Face length in 2D, 1 for the end points of an interval.
    pub measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub nodes: Vec<[f64; 2]>,
    /// Vertex lists: 2 per interval element, 4 per quadrilateral
    /// (counterclockwise).
    pub elements: Vec<Vec<usize>>,
    pub boundary_faces: Vec<BoundaryFace>,
    pub element_measure: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    dirichlet: Vec<bool>,
}

impl Mesh {
    /// Uniform interval [0, length] with `n` elements.
    pub fn build_interval(length: f64, n: usize, dirichlet_ends: &[Side]) -> Result<Mesh> {
        if n < 2 {
            return Err(Error::Domain(format!("interval mesh needs at least 2 elements, got {n}")));
        }
        if !(length > 0.0) {
            return Err(Error::Domain(format!("interval length must be positive, got {length}")));
        }
        if dirichlet_ends.is_empty() {
            return Err(Error::Domain("the Dirichlet boundary must be nonempty".into()));
        }
        if let Some(s) = dirichlet_ends.iter().find(|s| !matches!(s, Side::Left | Side::Right)) {
            return Err(Error::Domain(format!("side {s:?} does not exist on an interval")));
        }
        let h = length / n as f64;
        let nodes: Vec<[f64; 2]> = (0..=n).map(|i| [if i == n { length } else { i as f64 * h }, 0.0]).collect();
        let elements = (0..n).map(|e| vec![e, e + 1]).collect();
        let tag = |s: Side| if dirichlet_ends.contains(&s) { BoundaryTag::Dirichlet } else { BoundaryTag::Neumann };
        let boundary_faces = vec![
            BoundaryFace { nodes: vec![0], side: Side::Left, tag: tag(Side::Left), measure: 1.0 },
            BoundaryFace { nodes: vec![n], side: Side::Right, tag: tag(Side::Right), measure: 1.0 },
        ];
        Ok(Self::finish(1, nodes, elements, boundary_faces, vec![h; n], n, 0, length, 0.0))
    }

    /// Uniform rectangle [0, lx] x [0, ly] with nx x ny bilinear elements.
    pub fn build_rectangle(lx: f64, ly: f64, nx: usize, ny: usize, dirichlet_sides: &[Side]) -> Result<Mesh> {
        if nx < 2 || ny < 2 {
            return Err(Error::Domain(format!("rectangle mesh needs nx, ny >= 2, got {nx} x {ny}")));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::Domain("rectangle side lengths must be positive".into()));
        }
        if dirichlet_sides.is_empty() {
            return Err(Error::Domain("the Dirichlet boundary must be nonempty".into()));
        }
        let (hx, hy) = (lx / nx as f64, ly / ny as f64);
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let coord = |i: usize, n: usize, h: f64, l: f64| if i == n { l } else { i as f64 * h };
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([coord(i, nx, hx, lx), coord(j, ny, hy, ly)]);
            }
        }
        let mut elements = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                elements.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let tag = |s: Side| if dirichlet_sides.contains(&s) { BoundaryTag::Dirichlet } else { BoundaryTag::Neumann };
        let mut faces = Vec::with_capacity(2 * (nx + ny));
        for i in 0..nx {
            faces.push(BoundaryFace { nodes: vec![id(i, 0), id(i + 1, 0)], side: Side::Bottom, tag: tag(Side::Bottom), measure: hx });
            faces.push(BoundaryFace { nodes: vec![id(i, ny), id(i + 1, ny)], side: Side::Top, tag: tag(Side::Top), measure: hx });
        }
        for j in 0..ny {
            faces.push(BoundaryFace { nodes: vec![id(0, j), id(0, j + 1)], side: Side::Left, tag: tag(Side::Left), measure: hy });
            faces.push(BoundaryFace { nodes: vec![id(nx, j), id(nx, j + 1)], side: Side::Right, tag: tag(Side::Right), measure: hy });
        }
        Ok(Self::finish(2, nodes, elements, faces, vec![hx * hy; nx * ny], nx, ny, lx, ly))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        dim: usize,
        nodes: Vec<[f64; 2]>,
        elements: Vec<Vec<usize>>,
        boundary_faces: Vec<BoundaryFace>,
        element_measure: Vec<f64>,
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
    ) -> Mesh {
        let mut dirichlet = vec![false; nodes.len()];
        for f in boundary_faces.iter().filter(|f| f.tag == BoundaryTag::Dirichlet) {
            for &n in &f.nodes {
                dirichlet[n] = true;
            }
        }
        Mesh { dim, nodes, elements, boundary_faces, element_measure, nx, ny, lx, ly, dirichlet }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet[node]
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.dirichlet[i]).collect()
    }

    pub fn measure(&self) -> f64 {
        self.element_measure.iter().sum()
    }

    /// Characteristic length used to balance L² and H¹ parts of norms.
    pub fn length_scale(&self) -> f64 {
        if self.dim == 1 {
            self.lx
        } else {
            self.lx.max(self.ly)
        }
    }

    pub fn dirichlet_sides(&self) -> Vec<Side> {
        let mut s: Vec<Side> = self
            .boundary_faces
            .iter()
            .filter(|f| f.tag == BoundaryTag::Dirichlet)
            .map(|f| f.side)
            .collect();
        s.sort();
        s.dedup();
        s
    }
}

impl fmt::Display for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nd = self.boundary_faces.iter().filter(|b| b.tag == BoundaryTag::Dirichlet).count();
        if self.dim == 1 {
            write!(f, "interval [0, {}] with {} elements", self.lx, self.elements.len())?;
        } else {
            write!(f, "rectangle [0, {}] x [0, {}] with {} x {} elements", self.lx, self.ly, self.nx, self.ny)?;
        }
        write!(
            f,
            ", {} nodes, {} Dirichlet / {} Neumann faces (Dirichlet sides {:?})",
            self.nodes.len(),
            nd,
            self.boundary_faces.len() - nd,
            self.dirichlet_sides()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interval_counts() {
        let m = Mesh::build_interval(1.0, 4, &[Side::Left, Side::Right]).unwrap();
        let xs: Vec<f64> = m.nodes.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(m.measure(), 1.0);
        let l = Mesh::build_interval(1.0, 4, &[Side::Left]).unwrap();
        let nd = l.boundary_faces.iter().filter(|f| f.tag == BoundaryTag::Dirichlet).count();
        assert_eq!((nd, l.boundary_faces.len() - nd), (1, 1));
        assert!(Mesh::build_interval(1.0, 1, &[Side::Left]).is_err());
        assert!(Mesh::build_interval(1.0, 4, &[]).is_err());
    }

    #[test]
    fn rectangle_counts() {
        let m = Mesh::build_rectangle(1.0, 1.0, 2, 2, &[Side::Left]).unwrap();
        assert_eq!((m.nodes.len(), m.elements.len()), (9, 4));
        let nd = m.boundary_faces.iter().filter(|f| f.tag == BoundaryTag::Dirichlet).count();
        assert_eq!(nd, 2);
        let all = Mesh::build_rectangle(2.0, 3.0, 4, 5, &[Side::Left, Side::Right, Side::Bottom, Side::Top]).unwrap();
        let nd = all.boundary_faces.iter().filter(|f| f.tag == BoundaryTag::Dirichlet).count();
        assert_eq!(nd, 2 * (4 + 5));
        assert!((all.measure() - 6.0).abs() < 1e-12);
        assert!(Mesh::build_rectangle(1.0, 1.0, 2, 2, &[]).is_err());
    }

    proptest! {
        #[test]
        fn structured_counts_and_partition(nx in 2usize..12, ny in 2usize..12, mask in 1u8..16) {
            let sides: Vec<Side> = [Side::Left, Side::Right, Side::Bottom, Side::Top]
                .into_iter()
                .enumerate()
                .filter(|(k, _)| mask & (1 << k) != 0)
                .map(|(_, s)| s)
                .collect();
            let m = Mesh::build_rectangle(1.5, 0.5, nx, ny, &sides).unwrap();
            prop_assert_eq!(m.nodes.len(), (nx + 1) * (ny + 1));
            prop_assert_eq!(m.elements.len(), nx * ny);
            prop_assert_eq!(m.boundary_faces.len(), 2 * (nx + ny));
            let mut seen = std::collections::HashSet::new();
            for f in &m.boundary_faces {
                prop_assert!(seen.insert(f.nodes.clone()));
                let expect = if sides.contains(&f.side) { BoundaryTag::Dirichlet } else { BoundaryTag::Neumann };
                prop_assert_eq!(f.tag, expect);
            }
            prop_assert!(m.element_measure.iter().all(|&a| a > 0.0));
            for j in 0..=ny {
                for i in 0..nx {
                    let a = m.nodes[j * (nx + 1) + i][0];
                    let b = m.nodes[j * (nx + 1) + i + 1][0];
                    prop_assert!(b > a);
                }
            }
        }
    }
}
