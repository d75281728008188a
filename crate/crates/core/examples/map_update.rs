//! A lane line is repainted; votes from later drives outgrow the old ones and
//! the cells flip once the new label's count passes the old one.

use semmap::grid::{GridIndex, SemanticGridMap, SemanticLabel};

/// One session observing a 3 m line segment at `iy`, with the pavement it
/// used to cover now bare.
fn session(line_iy: i64, bare_iy: Option<i64>, votes: u16) -> SemanticGridMap {
    let mut m = SemanticGridMap::new();
    for ix in 0..30 {
        for _ in 0..votes {
            m.vote(GridIndex::new(ix, line_iy, 0), SemanticLabel::LaneLine);
            if let Some(iy) = bare_iy {
                m.vote(GridIndex::new(ix, iy, 0), SemanticLabel::Ground);
            }
        }
    }
    m
}

fn main() {
    let (old_iy, new_iy) = (-35, -30);
    let mut global = SemanticGridMap::new();
    for _ in 0..3 {
        global.merge_map(&session(old_iy, None, 12));
    }
    let probe = GridIndex::new(15, old_iy, 0);
    for k in 1..=6 {
        global.merge_map(&session(new_iy, Some(old_iy), 7));
        let s = global.get(&probe).unwrap();
        println!(
            "after repaint session {k}: old cell LaneLine {} vs Ground {} -> {}",
            s.get(SemanticLabel::LaneLine),
            s.get(SemanticLabel::Ground),
            s.label().map_or("?", |l| l.name())
        );
    }
}
