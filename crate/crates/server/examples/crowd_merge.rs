//! Three vehicles upload the same road; the merged map does not depend on
//! arrival order and a re-sent session is ignored.

use semmap::grid::{encode_upload, GridIndex, SemanticGridMap, SemanticLabel};
use semmap::codec::Region;
use semmap_server::{MapServer, SessionUpload};

fn session(k: i64) -> SessionUpload {
    let mut m = SemanticGridMap::new();
    for ix in 0..400 {
        let iy = if ix % 50 == k { 1 } else { 0 };
        m.vote(GridIndex::new(ix + 10 * k, iy, 0), SemanticLabel::LaneLine);
        m.vote(GridIndex::new(ix, 5, 0), SemanticLabel::Ground);
    }
    SessionUpload {
        vehicle_id: format!("car-{k}"),
        session_id: format!("drive-{k}"),
        payload: encode_upload(&m).expect("small map"),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sessions: Vec<_> = (0..3).map(session).collect();
    let mut fetched = Vec::new();
    for order in [[0, 1, 2], [2, 0, 1]] {
        let server = MapServer::in_memory();
        for &i in &order {
            let ack = server.handle_upload(&sessions[i])?;
            println!("order {order:?}: {} -> version {}", sessions[i].session_id, ack.version);
        }
        let ack = server.handle_upload(&sessions[order[0]])?;
        println!("order {order:?}: re-sent {} -> duplicate {}", sessions[order[0]].session_id, ack.duplicate);
        let (smap, version) = server.handle_fetch_map(&Region::everything())?;
        println!("order {order:?}: {:?}, {} B at version {version}", server.status(), smap.len());
        fetched.push(smap);
    }
    println!("identical maps: {}", fetched[0] == fetched[1]);
    Ok(())
}
