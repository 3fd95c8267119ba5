//! Forest of type-specific topology trees.
//!
//! Each resource type gets one tree whose internal nodes refine placement
//! (zone, rack, scale-up domain, host) down to instance leaves, the ownable
//! unit. Node ids are canonical path strings joined by `/`, with indices
//! zero-padded per level so lexicographic order equals depth-first order.
//! The forest is immutable after construction.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceTypeId(pub String);

impl fmt::Display for ResourceTypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Level label within a type tree. `Custom` carries its own label prefix so
/// scenarios can model e.g. power rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelKind {
    Zone,
    Rack,
    Scaleup,
    Host,
    Instance,
    Custom(String),
}

impl LevelKind {
    fn prefix(&self) -> &str {
        match self {
            LevelKind::Zone => "z",
            LevelKind::Rack => "r",
            LevelKind::Scaleup => "s",
            LevelKind::Host => "h",
            LevelKind::Instance => "i",
            LevelKind::Custom(label) => label,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSpec {
    pub kind: LevelKind,
    pub fanout: u32,
}

/// Construction schema for one type tree: ordered levels from just below the
/// type root down to instances (the last level must be `instance`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeSchema {
    pub type_name: String,
    pub levels: Vec<LevelSpec>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl TypeSchema {
    pub fn new(type_name: &str, levels: Vec<LevelSpec>) -> TypeSchema {
        TypeSchema {
            type_name: type_name.to_string(),
            levels,
            attributes: BTreeMap::new(),
        }
    }

    /// Convenience: default level kinds for a fanout list. Up to five levels
    /// map onto zone/rack/scaleup/host/instance; the last is always instance.
    pub fn from_fanouts(type_name: &str, fanouts: &[u32]) -> TypeSchema {
        let kinds = [
            LevelKind::Zone,
            LevelKind::Rack,
            LevelKind::Scaleup,
            LevelKind::Host,
        ];
        let n = fanouts.len();
        let levels = fanouts
            .iter()
            .enumerate()
            .map(|(idx, &fanout)| {
                let kind = if idx + 1 == n {
                    LevelKind::Instance
                } else {
                    // Pick inner kinds from the tail of the standard ladder so
                    // short schemas still end host/instance-like.
                    let skip = kinds.len().saturating_sub(n - 1);
                    kinds[(skip + idx).min(kinds.len() - 1)].clone()
                };
                LevelSpec { kind, fanout }
            })
            .collect();
        TypeSchema::new(type_name, levels)
    }
}

/// Index of a type tree within the forest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypeIx(pub u32);

/// Index of a node within its tree (0 = type root, depth-first order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeIx(pub u32);

/// Global node reference; a scope is any node in the forest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub tree: TypeIx,
    pub node: NodeIx,
}

/// A scoped request target: any node, including roots and leaves.
pub type Scope = NodeRef;

/// Global leaf reference by (tree, leaf ordinal). Leaf ordinals are dense
/// and follow depth-first order, so ordinal order equals canonical id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LeafRef {
    pub tree: TypeIx,
    pub leaf: u32,
}

#[derive(Clone, Debug)]
pub struct TopoNode {
    pub path: String,
    pub kind: LevelKind,
    pub parent: Option<NodeIx>,
    pub children: Vec<NodeIx>,
    /// Nodes on the path from root to here, root inclusive.
    pub depth: u32,
    /// Leaf ordinals covered by this node's subtree.
    pub leaf_span: Range<u32>,
}

impl TopoNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Leaf view: the ownable resource instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceLeaf<'a> {
    pub id: &'a str,
    pub node: NodeRef,
    pub leaf: LeafRef,
    pub type_id: &'a ResourceTypeId,
    pub attributes: &'a BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct TypeTree {
    pub type_id: ResourceTypeId,
    pub attributes: BTreeMap<String, String>,
    nodes: Vec<TopoNode>,
    /// leaf ordinal -> node index
    leaf_nodes: Vec<NodeIx>,
}

impl TypeTree {
    pub fn node(&self, ix: NodeIx) -> &TopoNode {
        &self.nodes[ix.0 as usize]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> u32 {
        self.leaf_nodes.len() as u32
    }

    pub fn leaf_node(&self, leaf_ord: u32) -> NodeIx {
        self.leaf_nodes[leaf_ord as usize]
    }

    pub fn root(&self) -> &TopoNode {
        &self.nodes[0]
    }

    fn build(schema: &TypeSchema) -> Result<TypeTree> {
        if schema.type_name.is_empty() || schema.type_name.contains('/') {
            return Err(MarketError::Config(format!(
                "invalid type name {:?}",
                schema.type_name
            )));
        }
        if schema.levels.is_empty() {
            return Err(MarketError::Config(format!(
                "type {:?} has an empty level schema",
                schema.type_name
            )));
        }
        if let Some(bad) = schema.levels.iter().find(|l| l.fanout == 0) {
            return Err(MarketError::Config(format!(
                "type {:?} level {:?} has fanout 0",
                schema.type_name, bad.kind
            )));
        }
        let last = schema.levels.last().unwrap();
        if last.kind != LevelKind::Instance {
            return Err(MarketError::Config(format!(
                "type {:?}: last level must be instance, got {:?}",
                schema.type_name, last.kind
            )));
        }
        if schema.levels[..schema.levels.len() - 1]
            .iter()
            .any(|l| l.kind == LevelKind::Instance)
        {
            return Err(MarketError::Config(format!(
                "type {:?}: instance level must be last",
                schema.type_name
            )));
        }

        let mut tree = TypeTree {
            type_id: ResourceTypeId(schema.type_name.clone()),
            attributes: schema.attributes.clone(),
            nodes: Vec::new(),
            leaf_nodes: Vec::new(),
        };
        tree.nodes.push(TopoNode {
            path: schema.type_name.clone(),
            kind: LevelKind::Custom("type".to_string()),
            parent: None,
            children: Vec::new(),
            depth: 1,
            leaf_span: 0..0,
        });
        tree.grow(NodeIx(0), &schema.levels)?;
        Ok(tree)
    }

    fn grow(&mut self, parent: NodeIx, remaining: &[LevelSpec]) -> Result<()> {
        let Some(level) = remaining.first() else {
            // Instance reached: register leaf ordinal.
            let ord = self.leaf_nodes.len() as u32;
            self.leaf_nodes.push(parent);
            self.nodes[parent.0 as usize].leaf_span = ord..ord + 1;
            return Ok(());
        };
        let width = (level.fanout as usize - 1).max(1).to_string().len().max(1);
        let span_start = self.leaf_nodes.len() as u32;
        for i in 0..level.fanout {
            let child_ix = NodeIx(self.nodes.len() as u32);
            let label = format!("{}{:0width$}", level.kind.prefix(), i, width = width);
            let path = format!("{}/{}", self.nodes[parent.0 as usize].path, label);
            let depth = self.nodes[parent.0 as usize].depth + 1;
            self.nodes.push(TopoNode {
                path,
                kind: level.kind.clone(),
                parent: Some(parent),
                children: Vec::new(),
                depth,
                leaf_span: 0..0,
            });
            self.nodes[parent.0 as usize].children.push(child_ix);
            self.grow(child_ix, &remaining[1..])?;
        }
        let span_end = self.leaf_nodes.len() as u32;
        self.nodes[parent.0 as usize].leaf_span = span_start..span_end;
        Ok(())
    }
}

/// The immutable forest of type trees. Construction is deterministic given
/// the schema list: node ids, indices, and leaf ordinals are reproducible.
#[derive(Clone, Debug)]
pub struct TopologyForest {
    trees: Vec<TypeTree>,
    by_type: BTreeMap<String, TypeIx>,
}

pub fn build_forest(schemas: &[TypeSchema]) -> Result<TopologyForest> {
    if schemas.is_empty() {
        return Err(MarketError::Config("forest needs at least one type".into()));
    }
    let mut forest = TopologyForest {
        trees: Vec::new(),
        by_type: BTreeMap::new(),
    };
    for schema in schemas {
        if forest.by_type.contains_key(&schema.type_name) {
            return Err(MarketError::Config(format!(
                "duplicate type {:?}",
                schema.type_name
            )));
        }
        let ix = TypeIx(forest.trees.len() as u32);
        forest.trees.push(TypeTree::build(schema)?);
        forest.by_type.insert(schema.type_name.clone(), ix);
    }
    Ok(forest)
}

impl TopologyForest {
    pub fn trees(&self) -> &[TypeTree] {
        &self.trees
    }

    pub fn tree(&self, ix: TypeIx) -> &TypeTree {
        &self.trees[ix.0 as usize]
    }

    pub fn type_ix(&self, type_name: &str) -> Result<TypeIx> {
        self.by_type
            .get(type_name)
            .copied()
            .ok_or_else(|| MarketError::NotFound(format!("type {type_name:?}")))
    }

    pub fn root_of(&self, type_name: &str) -> Result<NodeRef> {
        Ok(NodeRef {
            tree: self.type_ix(type_name)?,
            node: NodeIx(0),
        })
    }

    pub fn node(&self, r: NodeRef) -> &TopoNode {
        self.tree(r.tree).node(r.node)
    }

    pub fn node_id(&self, r: NodeRef) -> &str {
        &self.node(r).path
    }

    pub fn leaf_id(&self, l: LeafRef) -> &str {
        let tree = self.tree(l.tree);
        &tree.node(tree.leaf_node(l.leaf)).path
    }

    pub fn leaf_node_ref(&self, l: LeafRef) -> NodeRef {
        NodeRef {
            tree: l.tree,
            node: self.tree(l.tree).leaf_node(l.leaf),
        }
    }

    pub fn total_leaves(&self) -> u64 {
        self.trees.iter().map(|t| t.leaf_count() as u64).sum()
    }

    /// Resolve a canonical path string ("H100/z0/r1/...") to a node.
    pub fn resolve(&self, path: &str) -> Result<NodeRef> {
        let mut parts = path.split('/');
        let type_name = parts.next().unwrap_or("");
        let tree_ix = self.type_ix(type_name)?;
        let tree = self.tree(tree_ix);
        let mut cur = NodeIx(0);
        let mut prefix = type_name.to_string();
        for label in parts {
            prefix.push('/');
            prefix.push_str(label);
            let node = tree.node(cur);
            let Some(&child) = node
                .children
                .iter()
                .find(|&&c| tree.node(c).path == prefix)
            else {
                return Err(MarketError::NotFound(format!("node {path:?}")));
            };
            cur = child;
        }
        Ok(NodeRef {
            tree: tree_ix,
            node: cur,
        })
    }

    /// Leaf ordinals covered by a scope. Leaf spans are contiguous because
    /// construction is depth-first.
    pub fn leaf_span(&self, scope: Scope) -> Range<u32> {
        self.node(scope).leaf_span.clone()
    }

    /// Ordered resource leaves under a scope (depth-first order). A leaf
    /// scope returns itself.
    pub fn leaves_under(&self, scope: Scope) -> Vec<ResourceLeaf<'_>> {
        let tree = self.tree(scope.tree);
        self.leaf_span(scope)
            .map(|ord| {
                let node_ix = tree.leaf_node(ord);
                ResourceLeaf {
                    id: &tree.node(node_ix).path,
                    node: NodeRef {
                        tree: scope.tree,
                        node: node_ix,
                    },
                    leaf: LeafRef {
                        tree: scope.tree,
                        leaf: ord,
                    },
                    type_id: &tree.type_id,
                    attributes: &tree.attributes,
                }
            })
            .collect()
    }

    /// Ancestor chain from the given node up to its type root, inclusive on
    /// both ends and starting at the node itself.
    pub fn ancestors_of(&self, node: NodeRef) -> Vec<NodeRef> {
        let tree = self.tree(node.tree);
        let mut out = Vec::with_capacity(tree.node(node.node).depth as usize);
        let mut cur = Some(node.node);
        while let Some(ix) = cur {
            out.push(NodeRef {
                tree: node.tree,
                node: ix,
            });
            cur = tree.node(ix).parent;
        }
        out
    }

    /// Ancestors of a leaf from leaf to root.
    pub fn leaf_ancestors(&self, leaf: LeafRef) -> Vec<NodeRef> {
        self.ancestors_of(self.leaf_node_ref(leaf))
    }

    pub fn is_ancestor_or_self(&self, anc: NodeRef, desc: NodeRef) -> bool {
        if anc.tree != desc.tree {
            return false;
        }
        let tree = self.tree(anc.tree);
        let a = tree.node(anc.node);
        let d = tree.node(desc.node);
        a.depth <= d.depth
            && a.leaf_span.start <= d.leaf_span.start
            && d.leaf_span.end <= a.leaf_span.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forest_1type(fanouts: &[u32]) -> TopologyForest {
        build_forest(&[TypeSchema::from_fanouts("H100", fanouts)]).unwrap()
    }

    #[test]
    fn degenerate_chain_has_one_leaf() {
        let f = forest_1type(&[1, 1, 1]);
        assert_eq!(f.tree(TypeIx(0)).leaf_count(), 1);
    }

    #[test]
    fn fanout_product_and_depth() {
        let f = forest_1type(&[2, 2, 2]);
        let tree = f.tree(TypeIx(0));
        assert_eq!(tree.leaf_count(), 8);
        // depth 4 including root
        let leaf = f.leaf_node_ref(LeafRef {
            tree: TypeIx(0),
            leaf: 0,
        });
        assert_eq!(tree.node(leaf.node).depth, 4);
        assert_eq!(f.leaf_ancestors(LeafRef { tree: TypeIx(0), leaf: 0 }).len(), 4);
    }

    #[test]
    fn two_types_are_disjoint() {
        // Enumerate every node in both trees and assert paths never collide.
        let f = build_forest(&[
            TypeSchema::from_fanouts("H100", &[2, 4]),
            TypeSchema::from_fanouts("A100", &[3]),
        ])
        .unwrap();
        assert_eq!(f.tree(TypeIx(0)).leaf_count(), 8);
        assert_eq!(f.tree(TypeIx(1)).leaf_count(), 3);
        let mut seen = std::collections::BTreeSet::new();
        for tree in f.trees() {
            for ix in 0..tree.node_count() {
                assert!(seen.insert(tree.node(NodeIx(ix as u32)).path.clone()));
            }
        }
    }

    #[test]
    fn empty_schema_is_config_error() {
        assert!(matches!(
            build_forest(&[]),
            Err(MarketError::Config(_))
        ));
        assert!(matches!(
            build_forest(&[TypeSchema::new("X", vec![])]),
            Err(MarketError::Config(_))
        ));
    }

    #[test]
    fn leaf_scope_returns_itself() {
        let f = forest_1type(&[2, 2]);
        let leaf_node = f.leaf_node_ref(LeafRef {
            tree: TypeIx(0),
            leaf: 3,
        });
        let got = f.leaves_under(leaf_node);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].leaf.leaf, 3);
    }

    #[test]
    fn root_scope_covers_all_leaves() {
        let f = forest_1type(&[2, 2]);
        assert_eq!(f.leaves_under(f.root_of("H100").unwrap()).len(), 4);
    }

    #[test]
    fn rack_scope_filters_by_prefix() {
        // Brute-force check: leaves under a mid node are exactly the leaves
        // whose path starts with the node's path.
        let f = forest_1type(&[2, 3]);
        let rack = NodeRef {
            tree: TypeIx(0),
            node: f.tree(TypeIx(0)).root().children[1],
        };
        let under = f.leaves_under(rack);
        assert_eq!(under.len(), 3);
        let rack_path = f.node_id(rack).to_string();
        let all = f.leaves_under(f.root_of("H100").unwrap());
        let expect: Vec<_> = all
            .iter()
            .filter(|l| l.id.starts_with(&format!("{rack_path}/")))
            .map(|l| l.leaf)
            .collect();
        assert_eq!(under.iter().map(|l| l.leaf).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn ancestor_chain_is_prefix_chain() {
        let f = forest_1type(&[2, 2, 2]);
        for ord in 0..f.tree(TypeIx(0)).leaf_count() {
            let chain = f.leaf_ancestors(LeafRef {
                tree: TypeIx(0),
                leaf: ord,
            });
            assert_eq!(chain.len(), 4);
            for w in chain.windows(2) {
                let lower = f.node_id(w[0]);
                let upper = f.node_id(w[1]);
                assert!(lower.starts_with(upper));
            }
            assert_eq!(f.node_id(*chain.last().unwrap()), "H100");
        }
    }

    #[test]
    fn membership_iff_ancestor() {
        let f = forest_1type(&[2, 3]);
        let root = f.root_of("H100").unwrap();
        let tree = f.tree(TypeIx(0));
        for ord in 0..tree.leaf_count() {
            let leaf = LeafRef {
                tree: TypeIx(0),
                leaf: ord,
            };
            let ancs: Vec<_> = f.leaf_ancestors(leaf);
            for ix in 0..tree.node_count() {
                let n = NodeRef {
                    tree: TypeIx(0),
                    node: NodeIx(ix as u32),
                };
                let covered = f.leaf_span(n).contains(&ord);
                assert_eq!(covered, ancs.contains(&n), "node {}", f.node_id(n));
            }
        }
        // Root's children partition the root span.
        let mut seen = vec![false; tree.leaf_count() as usize];
        for &c in &tree.root().children {
            for ord in f.leaf_span(NodeRef { tree: TypeIx(0), node: c }) {
                assert!(!seen[ord as usize]);
                seen[ord as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        let _ = root;
    }

    #[test]
    fn unknown_nodes_are_not_found() {
        let f = forest_1type(&[2]);
        assert!(matches!(f.resolve("H100/z5"), Err(MarketError::NotFound(_))));
        assert!(matches!(f.resolve("B200"), Err(MarketError::NotFound(_))));
    }

    #[test]
    fn ids_are_sortable_and_deterministic() {
        let f = forest_1type(&[12]);
        let ids: Vec<_> = f
            .leaves_under(f.root_of("H100").unwrap())
            .iter()
            .map(|l| l.id.to_string())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted, "zero-padding keeps DFS order lexicographic");
        let g = forest_1type(&[12]);
        let ids2: Vec<_> = g
            .leaves_under(g.root_of("H100").unwrap())
            .iter()
            .map(|l| l.id.to_string())
            .collect();
        assert_eq!(ids, ids2);
    }
}
