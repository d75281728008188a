//! Compress a semantic grid to contours and back: a dashed line, a stop bar
//! and a ring-shaped sign with a hole.

use semmap::codec::{compress, decode, decompress_to_map, encode, Region};
use semmap::grid::{encode_upload, GridIndex, SemanticGridMap, SemanticLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut map = SemanticGridMap::new();
    for dash in 0..10 {
        for ix in dash * 90..dash * 90 + 30 {
            for iy in 0..2 {
                map.vote(GridIndex::new(ix, iy, 0), SemanticLabel::LaneLine);
            }
        }
    }
    for ix in 300..304 {
        for iy in -35..-2 {
            map.vote(GridIndex::new(ix, iy, 0), SemanticLabel::StopLine);
        }
    }
    for ix in 100..130i64 {
        for iy in -30..0i64 {
            let r2 = (ix - 115).pow(2) + (iy + 15).pow(2);
            if (36..=196).contains(&r2) {
                map.vote(GridIndex::new(ix, iy, 0), SemanticLabel::GroundSign);
            }
        }
    }

    let cm = compress(&map, &Region::everything());
    let smap = encode(&cm)?;
    let sgup = encode_upload(&map)?;
    println!(
        "{} cells -> {} contours; SGUP {} B, SMAP {} B ({:.1}%)",
        map.cell_count(),
        cm.contour_count(),
        sgup.len(),
        smap.len(),
        100.0 * smap.len() as f64 / sgup.len() as f64
    );

    let back = decompress_to_map(&decode(&smap)?)?;
    let same = map.iter().all(|(idx, s)| back.get(idx).map(|b| b.label()) == Some(s.label()));
    println!("every cell label survives the round trip: {same}");
    Ok(())
}
