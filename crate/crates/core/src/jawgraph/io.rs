use serde::Deserialize;

use super::{
    validate, JawEdge, JawGraph, JawGraphError, JawSide, ToothId, ToothLayout, ToothNode,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    jaw_side: JawSide,
    nodes: Vec<RawNode>,
    edges: Vec<JawEdge>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    tooth_id: ToothId,
    layout: Option<ToothLayout>,
    features: Vec<f64>,
    #[serde(default)]
    missing: bool,
}

/// Serializes a valid graph to pretty-printed JSON.
pub fn serialize(graph: &JawGraph) -> Result<String, JawGraphError> {
    validate(graph).map_err(JawGraphError::Invalid)?;
    Ok(serde_json::to_string_pretty(graph).expect("graph is always serializable"))
}

/// Parses a jaw-graph JSON document. A node whose layout is `null` is
/// always marked missing.
pub fn deserialize(text: &str) -> Result<JawGraph, JawGraphError> {
    let raw: RawGraph = serde_json::from_str(text).map_err(|e| JawGraphError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let nodes = raw
        .nodes
        .into_iter()
        .map(|n| ToothNode {
            tooth_id: n.tooth_id,
            missing: n.missing || n.layout.is_none(),
            layout: n.layout,
            features: n.features,
        })
        .collect();
    Ok(JawGraph {
        jaw_side: raw.jaw_side,
        nodes,
        edges: raw.edges,
    })
}
