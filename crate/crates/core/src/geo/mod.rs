//! Tower geometry and context: Delaunay neighbors, crawl radii, POI filtering
//! and tower classes.

pub mod delaunay;
pub mod poi;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TowerRecord;
use crate::lda::{self, LdaConfig, TopicModel};
use crate::sparse::{Index, SparseCountMatrix};

pub use poi::{fetch_all, fetch_pois, FixturePoiProvider, PoiFetch, PoiProvider};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSite {
    pub tower_id: String,
    pub lat: f64,
    pub lon: f64,
    /// Planar coordinates in meters.
    pub position: [f64; 2],
}

/// Local equirectangular projection about the centroid of `records`.
pub fn project_towers(records: &[TowerRecord]) -> Vec<TowerSite> {
    if records.is_empty() {
        return Vec::new();
    }
    let n = records.len() as f64;
    let lat0 = records.iter().map(|r| r.lat).sum::<f64>() / n;
    let lon0 = records.iter().map(|r| r.lon).sum::<f64>() / n;
    let cos0 = lat0.to_radians().cos();
    records
        .iter()
        .map(|r| TowerSite {
            tower_id: r.tower_id.clone(),
            lat: r.lat,
            lon: r.lon,
            position: [
                EARTH_RADIUS_M * (r.lon - lon0).to_radians() * cos0,
                EARTH_RADIUS_M * (r.lat - lat0).to_radians(),
            ],
        })
        .collect()
}

/// Sites given directly in planar coordinates.
pub fn planar_sites(points: &[[f64; 2]]) -> Vec<TowerSite> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| TowerSite {
            tower_id: format!("s{i}"),
            lat: 0.0,
            lon: 0.0,
            position: p,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangulation {
    /// Distinct sites, in first-occurrence order.
    pub sites: Vec<TowerSite>,
    /// For every input tower, its index in `sites`.
    pub site_of_input: Vec<usize>,
    /// `(alias, kept)` tower ids merged because their coordinates coincide.
    pub aliases: Vec<(String, String)>,
    /// Counter-clockwise triangles.
    pub triangles: Vec<[usize; 3]>,
    /// Undirected neighbor pairs `(i, j)` with `i < j`.
    pub edges: BTreeSet<(usize, usize)>,
}

/// Delaunay triangulation of the tower sites after merging exact duplicates.
pub fn delaunay(input: &[TowerSite]) -> Result<Triangulation> {
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut sites: Vec<TowerSite> = Vec::new();
    let mut site_of_input = Vec::with_capacity(input.len());
    let mut aliases = Vec::new();
    for s in input {
        if !(s.position[0].is_finite() && s.position[1].is_finite()) {
            return Err(Error::Geometry(format!("tower {} has non-finite coordinates", s.tower_id)));
        }
        // Normalize -0.0 so it merges with 0.0.
        let key = ((s.position[0] + 0.0).to_bits(), (s.position[1] + 0.0).to_bits());
        match seen.get(&key) {
            Some(&i) => {
                aliases.push((s.tower_id.clone(), sites[i].tower_id.clone()));
                site_of_input.push(i);
            }
            None => {
                seen.insert(key, sites.len());
                site_of_input.push(sites.len());
                sites.push(s.clone());
            }
        }
    }
    let points: Vec<[f64; 2]> = sites.iter().map(|s| s.position).collect();
    let triangles = delaunay::triangulate(&points)?;
    let edges = delaunay::edges_of(&triangles);
    Ok(Triangulation {
        sites,
        site_of_input,
        aliases,
        triangles,
        edges,
    })
}

impl Triangulation {
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.sites.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Crawl radius of every input tower (aliases share their site's radius).
    pub fn input_radii(&self) -> Result<Vec<f64>> {
        let adj = self.neighbors();
        let per_site = (0..self.sites.len())
            .map(|i| radius_from_neighbors(self, i, &adj[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.site_of_input.iter().map(|&s| per_site[s]).collect())
    }

    pub fn write_edges_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tower_a", "tower_b"])?;
        for &(a, b) in &self.edges {
            w.write_record([&self.sites[a].tower_id, &self.sites[b].tower_id])?;
        }
        w.flush().map_err(|e| Error::io("<edges>", e))?;
        Ok(())
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn radius_from_neighbors(tri: &Triangulation, site: usize, neighbors: &[usize]) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::Geometry(format!("site {site} has no Delaunay neighbor")));
    }
    let p = tri.sites[site].position;
    let total: f64 = neighbors.iter().map(|&j| distance(p, tri.sites[j].position)).sum();
    Ok(0.5 * total / neighbors.len() as f64)
}

/// Half the mean distance from `site` to its Delaunay neighbors.
pub fn crawl_radius(tri: &Triangulation, site: usize) -> Result<f64> {
    if site >= tri.sites.len() {
        return Err(Error::InvalidConfig(format!("site {site} out of range")));
    }
    let neighbors: Vec<usize> = tri
        .edges
        .iter()
        .filter_map(|&(a, b)| match (a == site, b == site) {
            (true, _) => Some(b),
            (_, true) => Some(a),
            _ => None,
        })
        .collect();
    radius_from_neighbors(tri, site, &neighbors)
}

/// POI documents after removing overly common categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPois {
    /// Surviving categories, sorted.
    pub vocabulary: Index,
    /// Removed categories with their document frequency.
    pub removed: Vec<(String, f64)>,
    pub docs: Vec<Vec<String>>,
}

impl FilteredPois {
    /// Towers x vocabulary counts.
    pub fn to_matrix(&self) -> SparseCountMatrix {
        let triplets = self.docs.iter().enumerate().flat_map(|(t, doc)| {
            doc.iter()
                .map(move |c| (t, self.vocabulary.get(c).expect("filtered category in vocabulary"), 1))
        });
        SparseCountMatrix::from_triplets(self.docs.len(), self.vocabulary.len(), triplets)
            .expect("indices in range")
    }
}

/// Drops every category whose document frequency (fraction of towers listing
/// it at least once) is strictly greater than `threshold`.
pub fn filter_frequent_categories(docs: &[Vec<String>], threshold: f64) -> Result<FilteredPois> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "poi frequency threshold must be in (0, 1], got {threshold}"
        )));
    }
    if docs.is_empty() {
        return Err(Error::Empty("no POI documents".into()));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        let distinct: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for c in distinct {
            *df.entry(c).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let mut removed: Vec<(String, f64)> = df
        .iter()
        .map(|(&c, &k)| (c, k as f64 / n))
        .filter(|&(_, f)| f > threshold)
        .map(|(c, f)| (c.to_string(), f))
        .collect();
    removed.sort_by(|a, b| a.0.cmp(&b.0));
    let dropped: BTreeSet<&str> = removed.iter().map(|(c, _)| c.as_str()).collect();
    let filtered: Vec<Vec<String>> = docs
        .iter()
        .map(|doc| doc.iter().filter(|c| !dropped.contains(c.as_str())).cloned().collect())
        .collect();
    if filtered.iter().all(Vec::is_empty) {
        return Err(Error::Empty("frequency filter removed every POI category".into()));
    }
    let vocabulary = Index::from_unsorted(filtered.iter().flatten().cloned());
    Ok(FilteredPois {
        vocabulary,
        removed,
        docs: filtered,
    })
}

/// Tower x class proportions; row `t` is the topic mixture of tower `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerClassMatrix {
    pub classes: Array2<f64>,
    pub model: TopicModel,
}

impl TowerClassMatrix {
    pub fn n_classes(&self) -> usize {
        self.classes.ncols()
    }
}

/// Topic model with towers as documents and POI categories as words.
pub fn tower_classes(filtered: &FilteredPois, classes: usize, config: &LdaConfig) -> Result<TowerClassMatrix> {
    let corpus = filtered.to_matrix();
    let config = LdaConfig {
        topics: classes,
        ..config.clone()
    };
    let model = lda::train(&corpus, filtered.vocabulary.ids(), &config)?;
    Ok(TowerClassMatrix {
        classes: model.theta.clone(),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_is_centered_and_metric() {
        let recs = vec![
            TowerRecord { tower_id: "a".into(), lat: 19.0, lon: -99.0 },
            TowerRecord { tower_id: "b".into(), lat: 19.01, lon: -99.0 },
        ];
        let s = project_towers(&recs);
        let d = distance(s[0].position, s[1].position);
        // 0.01 degree of latitude is about 1112 m.
        assert!((d - 1111.95).abs() < 1.0, "{d}");
        assert!((s[0].position[1] + s[1].position[1]).abs() < 1e-9);
    }

    #[test]
    fn three_points_are_mutual_neighbors() {
        let t = delaunay(&planar_sites(&[[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]])).unwrap();
        assert_eq!(t.triangles.len(), 1);
        assert_eq!(t.edges.iter().copied().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn unit_square_has_five_edges_and_a_pinned_diagonal() {
        let t = delaunay(&planar_sites(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])).unwrap();
        assert_eq!(t.edges.len(), 5);
        // Site 0 carries the largest lift, so it is "outside" every circle and
        // the diagonal avoids it.
        assert!(t.edges.contains(&(1, 3)));
        // The tie-break follows input indices, not coordinates.
        let t2 = delaunay(&planar_sites(&[[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])).unwrap();
        assert_eq!(t2.edges.len(), 5);
        assert!(t2.edges.contains(&(1, 3)));
    }

    #[test]
    fn duplicates_merge_into_aliases() {
        let mut sites = planar_sites(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        sites[3].tower_id = "dup".into();
        let t = delaunay(&sites).unwrap();
        assert_eq!(t.sites.len(), 3);
        assert_eq!(t.site_of_input, vec![0, 1, 2, 1]);
        assert_eq!(t.aliases, vec![("dup".to_string(), "s1".to_string())]);
        let radii = t.input_radii().unwrap();
        assert_eq!(radii[1], radii[3]);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(delaunay(&planar_sites(&[[0.0, 0.0], [1.0, 1.0]])).is_err());
        assert!(delaunay(&planar_sites(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])).is_err());
        assert!(delaunay(&planar_sites(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])).is_err());
    }

    #[test]
    fn crawl_radius_examples() {
        // Site 0 at the origin with neighbors at distance 2 and 4 only.
        let sites = planar_sites(&[[0.0, 0.0], [2.0, 0.0], [0.0, 4.0]]);
        let t = delaunay(&sites).unwrap();
        let r0 = crawl_radius(&t, 0).unwrap();
        assert!((r0 - 1.5).abs() < 1e-15);

        let mut t = delaunay(&planar_sites(&[[0.0, 0.0], [10.0, 0.0], [0.0, 7.0]])).unwrap();
        t.edges = [(0, 1)].into_iter().collect();
        assert_eq!(crawl_radius(&t, 0).unwrap(), 5.0);
        assert!(crawl_radius(&t, 2).is_err());
    }

    fn docs(rows: &[&[&str]]) -> Vec<Vec<String>> {
        rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn frequency_filter_is_strict() {
        // 10 towers: "common" in 3 (30%), "edge" in 2... make 8 towers for 25%.
        let mut rows: Vec<Vec<&str>> = (0..8).map(|_| vec!["x"]).collect();
        for r in rows.iter_mut().take(2) {
            r.push("quarter");
        }
        for r in rows.iter_mut().skip(2).take(3) {
            r.push("common");
        }
        let rows: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
        let f = filter_frequent_categories(&docs(&rows), 0.25);
        // "x" is in every tower and "common" in 37.5%; both go.
        let f = f.unwrap();
        assert_eq!(f.vocabulary.ids(), &["quarter".to_string()]);
        let removed: Vec<&str> = f.removed.iter().map(|(c, _)| c.as_str()).collect();
        assert_eq!(removed, vec!["common", "x"]);
    }

    #[test]
    fn thirty_percent_category_removed() {
        let names: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let mut rows: Vec<Vec<&str>> = names.iter().map(|n| vec![n.as_str()]).collect();
        for r in rows.iter_mut().take(3) {
            r.push("c");
        }
        let rows: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
        let f = filter_frequent_categories(&docs(&rows), 0.5).unwrap();
        assert!(f.vocabulary.get("c").is_some());
        let f = filter_frequent_categories(&docs(&rows), 0.25).unwrap();
        assert!(f.vocabulary.get("c").is_none());
    }

    #[test]
    fn filter_that_empties_everything_fails() {
        let d = docs(&[&["a"], &["a", "a"]]);
        assert!(matches!(filter_frequent_categories(&d, 0.25), Err(Error::Empty(_))));
        assert!(filter_frequent_categories(&d, 0.0).is_err());
        assert!(filter_frequent_categories(&d, 1.5).is_err());
    }

    #[test]
    fn filter_matches_document_frequency_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cats = ["a", "b", "c", "d", "e", "f"];
        let d: Vec<Vec<String>> = (0..40)
            .map(|_| {
                (0..rng.gen_range(0..6))
                    .map(|_| cats[(rng.gen::<f64>().powi(2) * 6.0) as usize].to_string())
                    .collect()
            })
            .collect();
        let f = filter_frequent_categories(&d, 0.3).unwrap();
        for c in cats {
            let towers = d.iter().filter(|doc| doc.iter().any(|x| x == c)).count();
            let keep = towers > 0 && (towers as f64 / 40.0) <= 0.3;
            assert_eq!(f.vocabulary.get(c).is_some(), keep, "category {c}");
        }
        let again = filter_frequent_categories(&f.docs, 0.3).unwrap();
        assert_eq!(again.docs, f.docs);
    }

    #[test]
    fn single_class_is_a_column_of_ones() {
        let d = docs(&[&["cafe", "bank"], &["bank"], &[], &["gym"]]);
        let f = filter_frequent_categories(&d, 1.0).unwrap();
        let cfg = LdaConfig { iterations: 10, ..Default::default() };
        let c = tower_classes(&f, 1, &cfg).unwrap();
        assert_eq!(c.classes.dim(), (4, 1));
        assert!(c.classes.iter().all(|&v| v == 1.0));
    }
}
