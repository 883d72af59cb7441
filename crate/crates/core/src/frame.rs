//! Parametric generator for clamped lattice towers on a unit grid.
//!
//! Every occupied unit cell contributes its 12 axis-aligned edges and, with
//! bracing on, the two diagonals of each of its 6 faces. Shared edges are
//! emitted once. Nodes and bars are numbered in a fixed lexicographic order
//! so that the same spec always yields the same model.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Bar, LatticeModel, MaterialLaw, Node};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    #[serde(default = "unit")]
    pub young: f64,
    #[serde(default = "unit")]
    pub section: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "yes")]
    pub damage: bool,
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for MaterialSpec {
    fn default() -> Self {
        Self {
            young: 1.0,
            section: 1.0,
            alpha: 2f64.sqrt(),
            beta: 0.5,
            damage: true,
        }
    }
}

/// Axis-aligned box; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxRegion {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        const TOL: f64 = 1e-9;
        (0..3).all(|c| p[c] >= self.min[c] - TOL && p[c] <= self.max[c] + TOL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// One unit bar along x, clamped at the origin, loaded axially at its
    /// free end. Grid extents and the loaded box are ignored.
    SingleBar,
    /// Every cell of the grid occupied.
    Solid,
    /// Square pillars of cells from z=0 to the deck, plus a full deck of
    /// `deck_thickness` cell layers at the top of the grid. Each pillar is
    /// given by the (x, y) cell index of its lower corner and its width in
    /// cells.
    Frame {
        pillars: Vec<Pillar>,
        deck_thickness: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pillar {
    pub x: usize,
    pub y: usize,
    #[serde(default = "one")]
    pub width: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    #[serde(default)]
    pub nx: usize,
    #[serde(default)]
    pub ny: usize,
    #[serde(default)]
    pub nz: usize,
    pub layout: Layout,
    #[serde(default = "yes")]
    pub bracing: bool,
    #[serde(default)]
    pub material: MaterialSpec,
    pub loaded_box: Option<BoxRegion>,
}

impl FrameSpec {
    pub fn single_bar() -> Self {
        Self {
            nx: 1,
            ny: 1,
            nz: 1,
            layout: Layout::SingleBar,
            bracing: false,
            material: MaterialSpec::default(),
            loaded_box: None,
        }
    }

    /// Tower used by the bundled scenarios: a 14 x 14 x 11 grid with four
    /// corner pillars of 2 x 2 cells under a one-cell deck, loaded on the top
    /// face over `x in [7, 9], y in [8, 10]`.
    pub fn tower() -> Self {
        let pillar = |x, y| Pillar { x, y, width: 2 };
        Self {
            nx: 14,
            ny: 14,
            nz: 11,
            layout: Layout::Frame {
                pillars: vec![pillar(0, 0), pillar(12, 0), pillar(0, 12), pillar(12, 12)],
                deck_thickness: 1,
            },
            bracing: true,
            material: MaterialSpec::default(),
            loaded_box: Some(BoxRegion {
                min: [7.0, 8.0, 11.0],
                max: [9.0, 10.0, 11.0],
            }),
        }
    }

    fn occupied(&self) -> Result<BTreeSet<[usize; 3]>> {
        let mut cells = BTreeSet::new();
        match &self.layout {
            Layout::SingleBar => {}
            Layout::Solid => {
                for z in 0..self.nz {
                    for y in 0..self.ny {
                        for x in 0..self.nx {
                            cells.insert([x, y, z]);
                        }
                    }
                }
            }
            Layout::Frame {
                pillars,
                deck_thickness,
            } => {
                if *deck_thickness == 0 || *deck_thickness > self.nz {
                    return Err(Error::InvalidModel(format!(
                        "deck thickness {deck_thickness} outside 1..={}",
                        self.nz
                    )));
                }
                let deck_base = self.nz - deck_thickness;
                for z in deck_base..self.nz {
                    for y in 0..self.ny {
                        for x in 0..self.nx {
                            cells.insert([x, y, z]);
                        }
                    }
                }
                for p in pillars {
                    if p.width == 0 || p.x + p.width > self.nx || p.y + p.width > self.ny {
                        return Err(Error::InvalidModel(format!(
                            "pillar at ({}, {}) leaves the grid",
                            p.x, p.y
                        )));
                    }
                    for z in 0..deck_base {
                        for y in p.y..p.y + p.width {
                            for x in p.x..p.x + p.width {
                                cells.insert([x, y, z]);
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Node pairs (as grid points) of one cell: 12 edges and, optionally, 12 face
/// diagonals.
fn cell_bars(c: [usize; 3], bracing: bool) -> Vec<([usize; 3], [usize; 3])> {
    let corner = |dx: usize, dy: usize, dz: usize| [c[0] + dx, c[1] + dy, c[2] + dz];
    let mut out = Vec::with_capacity(24);
    for a in 0..2 {
        for b in 0..2 {
            out.push((corner(0, a, b), corner(1, a, b)));
            out.push((corner(a, 0, b), corner(a, 1, b)));
            out.push((corner(a, b, 0), corner(a, b, 1)));
        }
    }
    if bracing {
        for s in 0..2 {
            // faces normal to x, y, z
            out.push((corner(s, 0, 0), corner(s, 1, 1)));
            out.push((corner(s, 1, 0), corner(s, 0, 1)));
            out.push((corner(0, s, 0), corner(1, s, 1)));
            out.push((corner(1, s, 0), corner(0, s, 1)));
            out.push((corner(0, 0, s), corner(1, 1, s)));
            out.push((corner(1, 0, s), corner(0, 1, s)));
        }
    }
    out
}

fn single_bar_model(material: &MaterialSpec) -> Result<LatticeModel> {
    let nodes = vec![
        Node {
            id: 0,
            position: Vector3::zeros(),
        },
        Node {
            id: 1,
            position: Vector3::x(),
        },
    ];
    let bars = vec![Bar {
        id: 0,
        k: 0,
        l: 1,
        section: material.section,
        young: material.young,
    }];
    let dirichlet = vec![(0, 0.0), (1, 0.0), (2, 0.0), (4, 0.0), (5, 0.0)];
    LatticeModel::new(nodes, bars, law(material), dirichlet, vec![(3, 1.0)])
}

fn law(m: &MaterialSpec) -> MaterialLaw {
    MaterialLaw {
        alpha: m.alpha,
        beta: m.beta,
        damage: m.damage,
    }
}

pub fn build_frame_lattice(spec: &FrameSpec) -> Result<LatticeModel> {
    if spec.layout == Layout::SingleBar {
        return single_bar_model(&spec.material);
    }
    if spec.nx == 0 || spec.ny == 0 || spec.nz == 0 {
        return Err(Error::InvalidModel("grid extents must be positive".into()));
    }
    let cells = spec.occupied()?;

    let mut pairs = BTreeSet::new();
    for &c in &cells {
        for (a, b) in cell_bars(c, spec.bracing) {
            pairs.insert(if key(a) < key(b) { (a, b) } else { (b, a) });
        }
    }
    let mut points: BTreeMap<[usize; 3], usize> = pairs
        .iter()
        .flat_map(|&(a, b)| [(key(a), 0), (key(b), 0)])
        .collect();
    for (i, id) in points.values_mut().enumerate() {
        *id = i;
    }
    let nodes: Vec<Node> = points
        .keys()
        .enumerate()
        .map(|(id, k)| Node {
            id,
            position: Vector3::new(k[2] as f64, k[1] as f64, k[0] as f64),
        })
        .collect();
    let mut conn: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(a, b)| (points[&key(a)], points[&key(b)]))
        .collect();
    conn.sort_unstable();
    let bars: Vec<Bar> = conn
        .iter()
        .enumerate()
        .map(|(id, &(k, l))| Bar {
            id,
            k,
            l,
            section: spec.material.section,
            young: spec.material.young,
        })
        .collect();

    let components = count_components(nodes.len(), &conn);
    if components != 1 {
        return Err(Error::Disconnected { components });
    }

    let base: Vec<&Node> = nodes.iter().filter(|n| n.position.z == 0.0).collect();
    let mut dirichlet: Vec<(usize, f64)> = base.iter().map(|n| (3 * n.id + 2, 0.0)).collect();
    // in-plane rigid modes: pin one base node in x and y, and a second one,
    // away from it, in the direction across the line joining them
    let anchor = base[0];
    dirichlet.push((3 * anchor.id, 0.0));
    dirichlet.push((3 * anchor.id + 1, 0.0));
    let far = base
        .iter()
        .max_by(|a, b| {
            let da = (a.position - anchor.position).norm();
            let db = (b.position - anchor.position).norm();
            da.total_cmp(&db).then(b.id.cmp(&a.id))
        })
        .unwrap();
    let arm = far.position - anchor.position;
    dirichlet.push((
        3 * far.id + if arm.x.abs() >= arm.y.abs() { 1 } else { 0 },
        0.0,
    ));

    let region = spec
        .loaded_box
        .ok_or_else(|| Error::InvalidModel("frame layouts need a loaded box".into()))?;
    let load_dofs: Vec<(usize, f64)> = nodes
        .iter()
        .filter(|n| region.contains(&n.position))
        .map(|n| (3 * n.id + 2, -1.0))
        .collect();
    if load_dofs.is_empty() {
        return Err(Error::NoLoad);
    }
    LatticeModel::new(nodes, bars, law(&spec.material), dirichlet, load_dofs)
}

/// Sort key (z, y, x) so that nodes are numbered layer by layer.
fn key(p: [usize; 3]) -> [usize; 3] {
    [p[2], p[1], p[0]]
}

fn count_components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(n: usize, bracing: bool) -> FrameSpec {
        FrameSpec {
            nx: n,
            ny: n,
            nz: n,
            layout: Layout::Solid,
            bracing,
            material: MaterialSpec::default(),
            loaded_box: Some(BoxRegion {
                min: [0.0, 0.0, n as f64],
                max: [n as f64, n as f64, n as f64],
            }),
        }
    }

    #[test]
    fn single_bar_has_one_free_dof() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        assert_eq!(m.n_bars(), 1);
        assert_eq!(m.n_free(), 1);
    }

    /// Brute-force count of distinct unit edges and face diagonals over all
    /// pairs of grid points of a solid cube.
    fn enumerate_bars(n: usize, bracing: bool) -> usize {
        let pts: Vec<[i64; 3]> = (0..=n as i64)
            .flat_map(|x| (0..=n as i64).flat_map(move |y| (0..=n as i64).map(move |z| [x, y, z])))
            .collect();
        let mut count = 0;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                let d: Vec<i64> = (0..3).map(|c| (a[c] - b[c]).abs()).collect();
                let ones = d.iter().filter(|&&v| v == 1).count();
                let zeros = d.iter().filter(|&&v| v == 0).count();
                if ones == 1 && zeros == 2 || bracing && ones == 2 && zeros == 1 {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn braced_cube_bar_count_matches_enumeration() {
        let m = build_frame_lattice(&solid(2, true)).unwrap();
        assert_eq!(m.n_bars(), enumerate_bars(2, true));
        assert_eq!(m.n_bars(), 126);
        let m = build_frame_lattice(&solid(2, false)).unwrap();
        assert_eq!(m.n_bars(), enumerate_bars(2, false));
        assert_eq!(m.n_nodes(), 27);
    }

    #[test]
    fn tower_loads_every_node_in_the_box() {
        let spec = FrameSpec::tower();
        let m = build_frame_lattice(&spec).unwrap();
        let region = spec.loaded_box.unwrap();
        let expected: Vec<usize> = m
            .nodes()
            .iter()
            .filter(|n| region.contains(&n.position))
            .map(|n| 3 * n.id + 2)
            .collect();
        assert_eq!(expected.len(), 9);
        let loaded: Vec<usize> = m.load_dofs().iter().map(|&(d, _)| d).collect();
        assert_eq!(loaded, expected);
        assert!(m.load_dofs().iter().all(|&(_, v)| v == -1.0));
        for n in m.nodes().iter().filter(|n| region.contains(&n.position)) {
            assert_eq!(n.position.z, 11.0);
        }
    }

    #[test]
    fn four_loaded_nodes_carry_half_unit() {
        let mut spec = solid(1, true);
        spec.loaded_box = Some(BoxRegion {
            min: [0.0, 0.0, 1.0],
            max: [1.0, 1.0, 1.0],
        });
        let m = build_frame_lattice(&spec).unwrap();
        let f = crate::lattice::external_forces(&m, 1.0);
        for &(dof, _) in m.load_dofs() {
            assert!((f[m.free_index(dof).unwrap()] + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn deck_thicker_than_grid_is_rejected() {
        let spec = FrameSpec {
            layout: Layout::Frame {
                pillars: vec![Pillar {
                    x: 0,
                    y: 0,
                    width: 1,
                }],
                deck_thickness: 4,
            },
            ..solid(3, true)
        };
        assert!(matches!(
            build_frame_lattice(&spec),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn component_count() {
        assert_eq!(count_components(4, &[(0, 1), (2, 3)]), 2);
        assert_eq!(count_components(3, &[(0, 1), (1, 2)]), 1);
    }

    #[test]
    fn empty_load_box_is_an_error() {
        let mut spec = solid(2, true);
        spec.loaded_box = Some(BoxRegion {
            min: [5.0; 3],
            max: [6.0; 3],
        });
        assert!(matches!(build_frame_lattice(&spec), Err(Error::NoLoad)));
    }
}
