//! CSV formats for detections, lineages, edges and tracks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use trax_core::linkers::Track;
use trax_core::{Detection, Features, Frame, LineageGraph, NodeId};

use crate::error::CliError;

pub const BASE_COLUMNS: [&str; 4] = ["frame", "id", "x", "y"];
pub const FEATURE_COLUMNS: [&str; 5] = ["area", "intensity", "ixx", "iyy", "ixy"];

/// Detections plus the feature columns that were present.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTable {
    pub detections: Vec<Detection>,
    pub n_features: usize,
}

impl DetectionTable {
    /// First feature column absent from the file, if any.
    pub fn missing_feature(&self) -> Option<&'static str> {
        FEATURE_COLUMNS.get(self.n_features).copied()
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::usage(format!("line {line}: cannot parse {what} from {s:?}")))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

pub fn read_detections_from<R: Read>(r: R) -> Result<DetectionTable, CliError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 4 || header[..4] != BASE_COLUMNS {
        return Err(CliError::usage(format!(
            "detections header must start with {}",
            BASE_COLUMNS.join(",")
        )));
    }
    let n_features = header.len() - 4;
    if n_features > 5 || header[4..] != FEATURE_COLUMNS[..n_features] {
        return Err(CliError::usage(format!(
            "feature columns must be a prefix of {}",
            FEATURE_COLUMNS.join(",")
        )));
    }
    let mut detections = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let f = |i: usize| -> Result<f64, CliError> { parse(&rec[i], header[i].as_str(), line) };
        let mut d = Detection::point(parse(&rec[1], "id", line)?, parse(&rec[0], "frame", line)?, f(2)?, f(3)?);
        if n_features == 5 {
            d.features = Some(Features {
                area: f(4)?,
                intensity: f(5)?,
                ixx: f(6)?,
                iyy: f(7)?,
                ixy: f(8)?,
            });
        }
        detections.push(d);
    }
    trax_core::lineage::validate_detections(&detections)?;
    Ok(DetectionTable { detections, n_features })
}

pub fn read_detections(path: &Path) -> Result<DetectionTable, CliError> {
    read_detections_from(open(path)?)
}

/// Rows sorted by `(frame, id)`; features are written only when every
/// detection has them.
pub fn write_detections_to<W: Write>(dets: &[Detection], w: W) -> Result<(), CliError> {
    let with_features = !dets.is_empty() && dets.iter().all(|d| d.features.is_some());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
    if with_features {
        header.extend(FEATURE_COLUMNS);
    }
    wtr.write_record(&header)?;
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by_key(|d| (d.frame, d.id));
    for d in sorted {
        let mut row = vec![d.frame.to_string(), d.id.to_string(), d.pos[0].to_string(), d.pos[1].to_string()];
        if let (true, Some(f)) = (with_features, &d.features) {
            row.extend([f.area, f.intensity, f.ixx, f.iyy, f.ixy].map(|v| v.to_string()));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<(), CliError> {
    write_detections_to(dets, create(path)?)
}

/// `id,parent_id` with `0` for no parent. A node with two parents cannot be
/// written and is rejected.
pub fn write_lineage_to<W: Write>(g: &LineageGraph, w: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["id", "parent_id"])?;
    let mut nodes: Vec<NodeId> = g.nodes().collect();
    nodes.sort_unstable();
    for n in nodes {
        if g.in_degree(n) > 1 {
            return Err(CliError::usage(format!("node {n} has more than one parent")));
        }
        wtr.write_record([n.to_string(), g.parent(n).unwrap_or(0).to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_lineage(g: &LineageGraph, path: &Path) -> Result<(), CliError> {
    write_lineage_to(g, create(path)?)
}

pub fn read_lineage_from<R: Read>(r: R) -> Result<LineageGraph, CliError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["id", "parent_id"] {
        return Err(CliError::usage("lineage header must be id,parent_id"));
    }
    let mut g = LineageGraph::new();
    let mut parents = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id: NodeId = parse(&rec[0], "id", k + 2)?;
        let parent: NodeId = parse(&rec[1], "parent_id", k + 2)?;
        g.add_node(id);
        if parent != 0 {
            parents.push((parent, id));
        }
    }
    for (p, c) in parents {
        if !g.contains_node(p) {
            return Err(CliError::usage(format!("parent {p} of node {c} is not listed")));
        }
        g.add_edge(p, c, None);
    }
    Ok(g)
}

pub fn read_lineage(path: &Path) -> Result<LineageGraph, CliError> {
    read_lineage_from(open(path)?)
}

/// `parent_id,child_id,score`, sorted by ids.
pub fn write_edges_to<W: Write>(g: &LineageGraph, w: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["parent_id", "child_id", "score"])?;
    for (p, c, s) in g.edges() {
        let score = s.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([p.to_string(), c.to_string(), score])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_edges(g: &LineageGraph, path: &Path) -> Result<(), CliError> {
    write_edges_to(g, create(path)?)
}

/// Edges over the given node set.
pub fn read_edges_from<R: Read>(r: R, nodes: impl IntoIterator<Item = NodeId>) -> Result<LineageGraph, CliError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["parent_id", "child_id", "score"] {
        return Err(CliError::usage("edges header must be parent_id,child_id,score"));
    }
    let mut g = LineageGraph::from_nodes(nodes);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let p: NodeId = parse(&rec[0], "parent_id", k + 2)?;
        let c: NodeId = parse(&rec[1], "child_id", k + 2)?;
        let s = if rec[2].trim().is_empty() {
            None
        } else {
            Some(parse::<f64>(&rec[2], "score", k + 2)?)
        };
        for n in [p, c] {
            if !g.contains_node(n) {
                return Err(CliError::usage(format!("edge endpoint {n} is not a detection")));
            }
        }
        g.add_edge(p, c, s);
    }
    Ok(g)
}

pub fn read_edges(path: &Path, nodes: impl IntoIterator<Item = NodeId>) -> Result<LineageGraph, CliError> {
    read_edges_from(open(path)?, nodes)
}

/// `track_id,start_frame,end_frame,parent_track_id`.
pub fn write_tracks_to<W: Write>(tracks: &[Track], w: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["track_id", "start_frame", "end_frame", "parent_track_id"])?;
    for t in tracks {
        wtr.write_record([t.id.to_string(), t.start.to_string(), t.end.to_string(), t.parent.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_tracks(tracks: &[Track], path: &Path) -> Result<(), CliError> {
    write_tracks_to(tracks, create(path)?)
}

pub fn frames_of(dets: &[Detection]) -> BTreeMap<NodeId, Frame> {
    dets.iter().map(|d| (d.id, d.frame)).collect()
}

pub fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detections_round_trip() {
        let dets = vec![
            Detection::point(2, 1, 0.1, 1e-17).with_features(Features {
                area: 3.0,
                intensity: 0.3,
                ixx: 1.5,
                iyy: 2.5,
                ixy: -0.25,
            }),
            Detection::point(1, 0, 1.0 / 3.0, 2.0).with_features(Features {
                area: 1.0,
                intensity: 2.0,
                ixx: 0.1,
                iyy: 0.2,
                ixy: 0.0,
            }),
        ];
        let mut buf = Vec::new();
        write_detections_to(&dets, &mut buf).unwrap();
        let back = read_detections_from(buf.as_slice()).unwrap();
        assert_eq!(back.n_features, 5);
        assert_eq!(back.detections, vec![dets[1].clone(), dets[0].clone()]);
    }

    #[test]
    fn partial_features_name_the_missing_column() {
        let t = read_detections_from("frame,id,x,y,area\n0,1,1.0,2.0,5\n".as_bytes()).unwrap();
        assert_eq!(t.missing_feature(), Some("intensity"));
        assert!(t.detections[0].features.is_none());
        assert!(read_detections_from("frame,id,x,y,intensity\n".as_bytes()).is_err());
        assert!(read_detections_from("id,frame,x,y\n".as_bytes()).is_err());
    }

    #[test]
    fn lineage_round_trip() {
        let mut g = LineageGraph::from_nodes([1, 2, 3, 4]);
        g.add_edge(1, 2, None);
        g.add_edge(1, 3, None);
        let mut buf = Vec::new();
        write_lineage_to(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "id,parent_id\n1,0\n2,1\n3,1\n4,0\n");
        assert_eq!(read_lineage_from(buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn edges_round_trip() {
        let mut g = LineageGraph::from_nodes([1, 2, 3]);
        g.add_edge(1, 2, Some(0.875));
        g.add_edge(2, 3, Some(0.1 + 0.2));
        let mut buf = Vec::new();
        write_edges_to(&g, &mut buf).unwrap();
        assert_eq!(read_edges_from(buf.as_slice(), [1, 2, 3]).unwrap(), g);
        assert!(read_edges_from(buf.as_slice(), [1, 2]).is_err());
    }
}
