//! Layered description of the toy multi-task network.

use serde::{Deserialize, Serialize};

use crate::autodiff::layers::LayerSpec;
use crate::error::{Error, Result};

/// Pseudo-id naming the network input (the image batch).
pub const INPUT_ID: &str = "input";

pub const TASKS: [&str; 3] = ["det", "da", "lane"];

/// One layer plus the id of its producer. `layers` is kept in topological
/// order, so `input` always names an earlier layer (or the network input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub input: String,
    pub spec: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadIds {
    pub det: String,
    pub da: String,
    pub lane: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub image_channels: usize,
    pub image_size: usize,
    pub layers: Vec<LayerNode>,
    pub tap_points: Vec<String>,
    pub heads: HeadIds,
}

/// Architecture knobs for the reference graph. Channel widths only; the
/// stage structure (stride-2 backbone convs, one encoder conv, three heads)
/// is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchOverrides {
    pub backbone: Vec<usize>,
    pub encoder: usize,
    pub head_width: usize,
}

impl Default for ArchOverrides {
    fn default() -> Self {
        ArchOverrides {
            backbone: vec![16, 32, 64],
            encoder: 64,
            head_width: 16,
        }
    }
}

impl ModelGraph {
    /// Shared-backbone three-task network over 64x64 images:
    /// stride-2 backbone convs (the only prunable layers), one encoder conv,
    /// a det head (pool + linear to 6 outputs), and da/lane heads that
    /// upsample back to full resolution for per-pixel logits.
    pub fn reference(arch: &ArchOverrides) -> Result<Self> {
        if arch.backbone.is_empty() {
            return Err(Error::Config("backbone must have at least one stage".into()));
        }
        let image_size = 64usize;
        if image_size % (1 << arch.backbone.len()) != 0 {
            return Err(Error::Config(format!(
                "{} backbone stages do not divide a {image_size}px image evenly",
                arch.backbone.len()
            )));
        }

        let mut layers = Vec::new();
        let mut prev_id = INPUT_ID.to_string();
        let mut prev_ch = 3usize;
        for (i, &ch) in arch.backbone.iter().enumerate() {
            let conv_id = format!("backbone.c{}", i + 1);
            let relu_id = format!("backbone.r{}", i + 1);
            layers.push(LayerNode {
                id: conv_id.clone(),
                input: prev_id.clone(),
                spec: LayerSpec::conv2d(prev_ch, ch, 3, 2, 1, true),
            });
            layers.push(LayerNode {
                id: relu_id.clone(),
                input: conv_id,
                spec: LayerSpec::relu(ch),
            });
            prev_id = relu_id;
            prev_ch = ch;
        }

        layers.push(LayerNode {
            id: "encoder.c1".into(),
            input: prev_id.clone(),
            spec: LayerSpec::conv2d(prev_ch, arch.encoder, 3, 1, 1, false),
        });
        layers.push(LayerNode {
            id: "encoder.r1".into(),
            input: "encoder.c1".into(),
            spec: LayerSpec::relu(arch.encoder),
        });
        let trunk = "encoder.r1".to_string();

        layers.push(LayerNode {
            id: "det.gap".into(),
            input: trunk.clone(),
            spec: LayerSpec::global_avg_pool(arch.encoder),
        });
        layers.push(LayerNode {
            id: "det.fc".into(),
            input: "det.gap".into(),
            spec: LayerSpec::linear(arch.encoder, 6),
        });

        for head in ["da", "lane"] {
            let c1 = format!("{head}.c1");
            let r1 = format!("{head}.r1");
            layers.push(LayerNode {
                id: c1.clone(),
                input: trunk.clone(),
                spec: LayerSpec::conv2d(arch.encoder, arch.head_width, 3, 1, 1, false),
            });
            layers.push(LayerNode {
                id: r1.clone(),
                input: c1,
                spec: LayerSpec::relu(arch.head_width),
            });
            let mut prev = r1;
            for u in 1..=arch.backbone.len() {
                let uid = format!("{head}.u{u}");
                layers.push(LayerNode {
                    id: uid.clone(),
                    input: prev,
                    spec: LayerSpec::bilinear_upsample(arch.head_width, 2),
                });
                prev = uid;
            }
            layers.push(LayerNode {
                id: format!("{head}.c2"),
                input: prev,
                spec: LayerSpec::conv2d(arch.head_width, 1, 3, 1, 1, false),
            });
        }

        let graph = ModelGraph {
            image_channels: 3,
            image_size,
            layers,
            tap_points: vec![
                format!("backbone.c{}", arch.backbone.len()),
                "encoder.c1".into(),
            ],
            heads: HeadIds {
                det: "det.fc".into(),
                da: "da.c2".into(),
                lane: "lane.c2".into(),
            },
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn layer(&self, id: &str) -> Result<&LayerNode> {
        self.layers
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    /// Layers reading the output of `id`.
    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.layers.iter().filter(|n| n.input == id).collect()
    }

    pub fn prunable_layers(&self) -> Vec<&LayerNode> {
        self.layers.iter().filter(|n| n.spec.prunable).collect()
    }

    /// Analytic parameter count: Σ(out·in·k² + out) over parameterized layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|n| n.spec.param_count()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let mut seen: Vec<&str> = Vec::new();
        for node in &self.layers {
            if node.id.is_empty() || node.id == INPUT_ID {
                return Err(Error::Config(format!("illegal layer id '{}'", node.id)));
            }
            if seen.contains(&node.id.as_str()) {
                return Err(Error::Config(format!("duplicate layer id '{}'", node.id)));
            }
            node.spec.validate()?;
            let producer_channels = if node.input == INPUT_ID {
                self.image_channels
            } else if seen.contains(&node.input.as_str()) {
                self.layer(&node.input)?.spec.out_channels
            } else {
                // Unknown or later producer: both break the topological order
                // that forward relies on.
                return Err(Error::Config(format!(
                    "layer '{}' reads '{}' which is not an earlier layer",
                    node.id, node.input
                )));
            };
            if node.spec.in_channels != producer_channels {
                return Err(Error::Config(format!(
                    "layer '{}' expects {} channels but '{}' provides {}",
                    node.id, node.spec.in_channels, node.input, producer_channels
                )));
            }
            seen.push(&node.id);
        }
        for tap in &self.tap_points {
            self.layer(tap)?;
        }
        for head in [&self.heads.det, &self.heads.da, &self.heads.lane] {
            self.layer(head)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::layers::LayerKind;

    #[test]
    fn reference_graph_validates_and_counts_parameters() {
        let g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        // 448 + 4640 + 18496 backbone, 36928 encoder, 390 det,
        // 2 x (9232 + 145) seg heads
        assert_eq!(g.param_count(), 79656);
    }

    #[test]
    fn prunable_layers_are_exactly_the_backbone_convs() {
        let g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        let prunable: Vec<&str> = g.prunable_layers().iter().map(|n| n.id.as_str()).collect();
        assert_eq!(prunable, vec!["backbone.c1", "backbone.c2", "backbone.c3"]);
        for node in &g.layers {
            if node.spec.prunable {
                assert_eq!(node.spec.kind, LayerKind::Conv2d);
            }
        }
    }

    #[test]
    fn heads_and_taps_name_existing_layers() {
        let g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        assert!(g.layer("det.fc").is_ok());
        assert!(g.layer("da.c2").is_ok());
        assert!(g.layer("lane.c2").is_ok());
        for tap in &g.tap_points {
            assert!(g.layer(tap).is_ok());
        }
        assert!(g.layer("nonexistent").is_err());
    }

    #[test]
    fn out_of_order_producer_is_rejected() {
        let mut g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        g.layers[0].input = "encoder.c1".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        g.layers[2].spec.in_channels = 12;
        assert!(g.validate().is_err());
    }

    #[test]
    fn consumer_lookup_follows_edges() {
        let g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        let ids: Vec<&str> = g.consumers("encoder.r1").iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["det.gap", "da.c1", "lane.c1"]);
    }

    #[test]
    fn graph_round_trips_through_json() {
        let g = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: ModelGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }
}
