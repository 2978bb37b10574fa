//! Hierarchical user features: windowed behaviors traced to every tree level.

use crate::corpus::{window_items, BehaviorSequence, ItemId, WindowedFeatures};
use crate::error::Result;
use crate::tree::{NodeId, Tree};

/// Maps an item to its node on a given level.
pub trait ItemTracer {
    fn max_level(&self) -> usize;
    fn trace(&self, item: ItemId, level: usize) -> Result<NodeId>;
}

impl ItemTracer for Tree {
    fn max_level(&self) -> usize {
        Tree::max_level(self)
    }

    fn trace(&self, item: ItemId, level: usize) -> Result<NodeId> {
        self.item_ancestor(item, level)
    }
}

/// A user's windows traced to each level `0..=max_level`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserFeatures {
    levels: Vec<Vec<Vec<NodeId>>>,
}

impl UserFeatures {
    pub fn trace(windows: &WindowedFeatures, tracer: &(impl ItemTracer + ?Sized)) -> Result<Self> {
        let levels = (0..=tracer.max_level())
            .map(|level| {
                windows
                    .windows
                    .iter()
                    .map(|w| w.iter().map(|&i| tracer.trace(i, level)).collect())
                    .collect::<Result<Vec<Vec<NodeId>>>>()
            })
            .collect::<Result<_>>()?;
        Ok(UserFeatures { levels })
    }

    /// Windows the sequence into `num_windows` groups and traces them.
    pub fn from_sequence(
        seq: &BehaviorSequence,
        num_windows: usize,
        tracer: &(impl ItemTracer + ?Sized),
    ) -> Result<Self> {
        let items: Vec<ItemId> = seq.items().collect();
        Self::trace(&window_items(&items, num_windows), tracer)
    }

    /// Traced windows for `level`.
    pub fn level(&self, level: usize) -> &[Vec<NodeId>] {
        &self.levels[level]
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.levels
            .last()
            .is_none_or(|w| w.iter().all(Vec::is_empty))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;
    use crate::tree::build_category_tree;

    #[test]
    fn traces_every_level() {
        let t = build_category_tree(&(0..8).map(|i| (i, 0)).collect::<Vec<_>>(), 0).unwrap();
        let seq = BehaviorSequence {
            user_id: 0,
            events: (0..4)
                .map(|i| Event {
                    item_id: i * 2,
                    timestamp: i,
                })
                .collect(),
        };
        let f = UserFeatures::from_sequence(&seq, 2, &t).unwrap();
        assert_eq!(f.max_level(), 3);
        assert_eq!(f.level(0), &[vec![NodeId::ROOT; 2], vec![NodeId::ROOT; 2]]);
        assert_eq!(f.level(3)[1], vec![NodeId(11), NodeId(13)]);
        assert!(!f.is_empty());
    }
}
