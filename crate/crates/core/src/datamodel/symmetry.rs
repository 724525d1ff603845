use super::types::{PositionId, NUM_POSITIONS};

/// Bilateral pairing of measurement positions.
///
/// Left-side positions 2..=18 mirror right-side 19..=35, the eyelids 36 and
/// 37 mirror each other, and position 1 (between the eyebrows) sits on the
/// midline with no partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymmetryTable {
    partner: [Option<PositionId>; NUM_POSITIONS],
}

impl SymmetryTable {
    pub fn partner(&self, id: PositionId) -> Option<PositionId> {
        self.partner[id.index()]
    }

    pub fn is_midline(&self, id: PositionId) -> bool {
        self.partner(id).is_none()
    }

    pub fn midline(&self) -> impl Iterator<Item = PositionId> + '_ {
        PositionId::all().filter(|&d| self.is_midline(d))
    }

    /// Each pair once, as (lower id, higher id).
    pub fn pairs(&self) -> impl Iterator<Item = (PositionId, PositionId)> + '_ {
        PositionId::all().filter_map(|d| self.partner(d).filter(|&p| p > d).map(|p| (d, p)))
    }
}

impl Default for SymmetryTable {
    fn default() -> Self {
        build_symmetry_table()
    }
}

pub fn build_symmetry_table() -> SymmetryTable {
    let mut partner = [None; NUM_POSITIONS];
    let id = |d: u8| PositionId::new(d).expect("static position id");
    for d in 2..=18u8 {
        partner[id(d).index()] = Some(id(d + 17));
        partner[id(d + 17).index()] = Some(id(d));
    }
    partner[id(36).index()] = Some(id(37));
    partner[id(37).index()] = Some(id(36));
    SymmetryTable { partner }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(d: u8) -> PositionId {
        PositionId::new(d).unwrap()
    }

    #[test]
    fn documented_pairs() {
        let t = build_symmetry_table();
        assert_eq!(t.partner(id(2)), Some(id(19)));
        assert_eq!(t.partner(id(36)), Some(id(37)));
        assert_eq!(t.partner(id(1)), None);
    }

    #[test]
    fn involution_and_partition() {
        let t = build_symmetry_table();
        for d in PositionId::all() {
            if let Some(p) = t.partner(d) {
                assert_ne!(p, d);
                assert_eq!(t.partner(p), Some(d));
            }
        }
        let mid: Vec<_> = t.midline().collect();
        assert_eq!(mid, vec![id(1)]);
        assert_eq!(t.pairs().count(), 18);
        let paired: usize = t.pairs().count() * 2;
        assert_eq!(paired + mid.len(), NUM_POSITIONS);
    }
}
