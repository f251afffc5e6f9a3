//! Properties of the shipped checkpoint on worlds it was neither trained nor
//! calibrated on.

use std::path::PathBuf;

use homerun::gridworld::{generate_world, Action, Heading, Pose};
use homerun::harness::calibrate::Calibration;
use homerun::harness::dataset::forage;
use homerun::harness::scenario::TEST_WORLDS;
use homerun::planner::mean_sq_diff;
use homerun::worldmodel::{load_checkpoint, Belief};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn imagined_forward_into_a_wall_decodes_to_the_same_frame() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models/tiny.hrck");
    let (model, meta) = load_checkpoint(&path).expect("shipped checkpoint");
    let cal = Calibration::from_json(meta.calibration.as_ref().expect("calibrated checkpoint")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut stuck, mut total) = (0usize, 0usize);
    for entry in &TEST_WORLDS {
        let world = generate_world(&entry.spec().unwrap()).unwrap();
        let tiles = world.walkable_tiles();
        let (x, y) = tiles[tiles.len() / 3];
        let mut pose = Pose::new(x, y, Heading::NORTH);
        let mut belief = model.filter(&Belief::initial(model.config()), None, &world.render_view(&pose));
        for a in forage(&world, pose, 400, &mut rng) {
            let (next, blocked) = world.next_pose(pose, a);
            if a == Action::Forward && blocked {
                let now = model.decode_one(&belief.state.mean);
                for r in model.imagine(&belief, &[Action::Forward], 3, total as u64) {
                    let next_frame = model.decode_one(&r.samples[0]);
                    stuck += usize::from(mean_sq_diff(&next_frame, &now) < cal.tau_same);
                    total += 1;
                }
            }
            pose = next;
            belief = model.filter(&belief, Some(a), &world.render_view(&pose));
        }
    }
    let rate = stuck as f64 / total as f64;
    println!("imagined wall bumps judged stuck: {stuck}/{total} = {rate:.3}");
    assert!(total >= 30, "too few wall bumps: {total}");
    assert!(rate >= 0.6, "only {rate:.3} of imagined wall bumps stay put");
}
