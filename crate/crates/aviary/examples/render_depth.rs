//! Load an arena and visualize what the depth camera sees from the spawn.
//!
//!     cargo run --release --example render_depth [ARENA_FILE]

use aviary::arena::load_arena;
use aviary::simcore::render_depth;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        format!("{}/arenas/train.arena", env!("CARGO_MANIFEST_DIR"))
    });
    let text = std::fs::read_to_string(&path).expect("read arena file");
    let arena = load_arena(&text).expect("valid arena");
    println!(
        "{path}: bounds {:?} -> {:?}, {} obstacles, goal plane x = {}",
        arena.bounds().min,
        arena.bounds().max,
        arena.obstacles().len(),
        arena.goal_x()
    );

    let mut rng = StdRng::seed_from_u64(7);
    let pose = arena.sample_spawn(&mut rng);
    let max_range = 20.0;
    let img = render_depth(&arena, &pose, std::f64::consts::FRAC_PI_2, max_range);

    println!(
        "camera at ({:.2}, {:.2}, {:.2}) facing +x, 90 deg FOV, {} m range",
        pose.position.x, pose.position.y, pose.position.z, max_range
    );
    // near = dark = '@', far = light = ' '
    let ramp: &[u8] = b"@%#*+=-:. ";
    for r in 0..img.height() {
        let mut line = String::with_capacity(img.width() * 2);
        for c in 0..img.width() {
            let d = img.at(r, c) as f64 / max_range;
            let idx = ((d * (ramp.len() - 1) as f64).round() as usize).min(ramp.len() - 1);
            let ch = ramp[idx] as char;
            line.push(ch);
            line.push(ch);
        }
        println!("{line}");
    }
    let center = img.at(16, 16);
    println!("center-pixel distance: {center:.3} m");
}
