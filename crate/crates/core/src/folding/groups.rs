use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::FoldError;
use crate::nn::{BlockRef, Layer, Network};

/// A layer emitting the group's channels, with the BatchNorm applied directly to its output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Producer {
    pub at: BlockRef,
    pub batch_norm: Option<BlockRef>,
}

/// A layer reading the group's channels. `spatial` is the number of consecutive
/// input features per channel (`h·w` for a Dense layer after Flatten, else 1).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumer {
    pub at: BlockRef,
    pub spatial: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    Single,
    /// Several producers summed by residual additions share one clustering.
    ResidualShared,
}

/// Every block touching one foldable channel dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldableGroup {
    pub producers: Vec<Producer>,
    /// BatchNorm layers on these channels that do not directly follow a producer
    /// (e.g. after a residual addition).
    pub batch_norms: Vec<BlockRef>,
    pub consumers: Vec<Consumer>,
    pub channels: usize,
    /// Block outputs carrying these channels unflattened.
    pub sites: Vec<BlockRef>,
}

impl FoldableGroup {
    pub fn kind(&self) -> GroupKind {
        if self.producers.len() > 1 {
            GroupKind::ResidualShared
        } else {
            GroupKind::Single
        }
    }

    /// True when every producer carries its own BatchNorm.
    pub fn has_batch_norm(&self) -> bool {
        self.producers.iter().all(|p| p.batch_norm.is_some())
    }
}

/// Result of group discovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSet {
    /// Foldable groups, ordered by their earliest producer in forward order.
    pub groups: Vec<FoldableGroup>,
    /// Producers whose channels cannot be folded (network outputs, or channels tied
    /// to the raw input through an identity shortcut).
    pub fixed: Vec<BlockRef>,
}

#[derive(Default)]
struct Draft {
    producers: Vec<Producer>,
    batch_norms: Vec<BlockRef>,
    consumers: Vec<Consumer>,
    sites: Vec<BlockRef>,
    channels: usize,
    tied_to_input: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Flow {
    Input,
    Group(usize),
}

struct Walker {
    drafts: Vec<Draft>,
    parent: Vec<usize>,
    spatial: usize,
}

impl Walker {
    fn root(&mut self, mut g: usize) -> usize {
        while self.parent[g] != g {
            self.parent[g] = self.parent[self.parent[g]];
            g = self.parent[g];
        }
        g
    }

    fn draft(&mut self, g: usize) -> &mut Draft {
        let r = self.root(g);
        &mut self.drafts[r]
    }

    fn union(&mut self, a: Flow, b: Flow) -> Flow {
        match (a, b) {
            (Flow::Input, Flow::Input) => Flow::Input,
            (Flow::Input, Flow::Group(g)) | (Flow::Group(g), Flow::Input) => {
                self.draft(g).tied_to_input = true;
                Flow::Group(g)
            }
            (Flow::Group(x), Flow::Group(y)) => {
                let (rx, ry) = (self.root(x), self.root(y));
                if rx != ry {
                    let moved = std::mem::take(&mut self.drafts[ry]);
                    let d = &mut self.drafts[rx];
                    d.producers.extend(moved.producers);
                    d.batch_norms.extend(moved.batch_norms);
                    d.consumers.extend(moved.consumers);
                    d.sites.extend(moved.sites);
                    d.tied_to_input |= moved.tied_to_input;
                    self.parent[ry] = rx;
                }
                Flow::Group(rx)
            }
        }
    }

    fn walk(
        &mut self,
        layers: &[Layer],
        at: &dyn Fn(usize) -> BlockRef,
        mut flow: Flow,
        mut shape: Vec<usize>,
    ) -> Result<Flow, FoldError> {
        // Group whose producer is the immediately preceding block, for BatchNorm attachment.
        let mut fresh: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            let r = at(i);
            match layer {
                Layer::Dense(_) | Layer::Conv2d(_) => {
                    if let Flow::Group(g) = flow {
                        let spatial = self.spatial;
                        self.draft(g).consumers.push(Consumer { at: r, spatial });
                    }
                    let channels = match layer {
                        Layer::Dense(d) => d.out_features(),
                        Layer::Conv2d(c) => c.out_channels(),
                        _ => unreachable!(),
                    };
                    let g = self.drafts.len();
                    self.drafts.push(Draft {
                        producers: vec![Producer {
                            at: r,
                            batch_norm: None,
                        }],
                        channels,
                        ..Default::default()
                    });
                    self.parent.push(g);
                    flow = Flow::Group(g);
                    fresh = Some(g);
                    self.spatial = 1;
                }
                Layer::BatchNorm(_) => {
                    if let Flow::Group(g) = flow {
                        let attached = fresh == Some(g) && {
                            let d = self.draft(g);
                            let p = d.producers.last_mut().expect("fresh group has a producer");
                            p.batch_norm.replace(r).is_none()
                        };
                        if !attached {
                            self.draft(g).batch_norms.push(r);
                        }
                    }
                    fresh = None;
                }
                Layer::Relu | Layer::AvgPool(_) => fresh = None,
                Layer::Flatten => {
                    fresh = None;
                    if shape.len() > 1 {
                        self.spatial = shape[1..].iter().product();
                    }
                }
                Layer::Residual(res) => {
                    fresh = None;
                    let top = r.top;
                    let main = self.walk(&res.main, &|j| BlockRef::main(top, j), flow, shape.clone())?;
                    let short = if res.shortcut.is_empty() {
                        flow
                    } else {
                        self.walk(&res.shortcut, &|j| BlockRef::shortcut(top, j), flow, shape.clone())?
                    };
                    flow = self.union(main, short);
                }
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| FoldError::Topology(format!("block {r}: {e}")))?;
            if let Flow::Group(g) = flow {
                if self.spatial == 1 {
                    self.draft(g).sites.push(r);
                }
            }
        }
        Ok(flow)
    }
}

/// Finds every foldable channel group of a network.
pub fn discover_groups(network: &Network) -> Result<GroupSet, FoldError> {
    network.validate()?;
    let order: HashMap<BlockRef, usize> = network
        .block_refs()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r, i))
        .collect();
    let mut w = Walker {
        drafts: Vec::new(),
        parent: Vec::new(),
        spatial: 1,
    };
    w.walk(
        &network.blocks,
        &BlockRef::top,
        Flow::Input,
        network.input_shape.clone(),
    )?;
    let mut groups = Vec::new();
    let mut fixed = Vec::new();
    for g in 0..w.drafts.len() {
        if w.root(g) != g {
            continue;
        }
        let d = std::mem::take(&mut w.drafts[g]);
        if d.consumers.is_empty() || d.tied_to_input {
            fixed.extend(d.producers.iter().map(|p| p.at));
            continue;
        }
        let mut group = FoldableGroup {
            producers: d.producers,
            batch_norms: d.batch_norms,
            consumers: d.consumers,
            channels: d.channels,
            sites: d.sites,
        };
        group.producers.sort_by_key(|p| order[&p.at]);
        group.batch_norms.sort_by_key(|r| order[r]);
        group.consumers.sort_by_key(|c| order[&c.at]);
        group.sites.sort_by_key(|r| order[r]);
        group.sites.dedup();
        groups.push(group);
    }
    groups.sort_by_key(|g| order[&g.producers[0].at]);
    fixed.sort_by_key(|r| order[r]);
    Ok(GroupSet { groups, fixed })
}
