//! Dense reconstruction of a ray-cast room compared against exact depth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spheresfm_core::dense::{compute_disparity, dense_cloud, rectify_pair, DisparityParams};
use spheresfm_core::epipolar::{solve_two_view, BearingPair, FitMethod};
use spheresfm_core::multiview::yaw_matrix;
use spheresfm_core::synth::BoxRoom;
use spheresfm_core::{CameraPose, ImageSize};

#[test]
fn room_depth_within_five_percent() {
    let room = BoxRoom::default();
    let cam1 = CameraPose {
        center: Vector3::new(-0.4, -0.2, 0.1),
        ..CameraPose::identity()
    };
    let cam2 = CameraPose {
        rotation: yaw_matrix(0.35),
        center: Vector3::new(0.4, 0.3, 0.1),
    };
    let baseline = (cam2.center - cam1.center).norm();
    let size = ImageSize::new(1024, 512).unwrap();
    let img1 = room.render(&cam1, size, 2);
    let img2 = room.render(&cam2, size, 2);

    // relative pose from exact sparse bearings of wall points
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<BearingPair> = (0..50)
        .map(|_| {
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let p = cam1.center + d * room.ray_depth(&cam1.center, &d).unwrap();
            BearingPair::new(cam1.project(&p).unwrap(), cam2.project(&p).unwrap())
        })
        .collect();
    let solution = solve_two_view(&pairs, FitMethod::Linear).unwrap();

    let rect = rectify_pair(&img1, &img2, &solution, size);
    let disp = compute_disparity(&rect, &DisparityParams::default()).unwrap();
    let cloud = dense_cloud(&disp, &rect, baseline).unwrap();
    assert_eq!(cloud.len(), disp.valid_count());

    let mut good = 0;
    for p in &cloud {
        let range = p.position.norm();
        let truth = room.ray_depth(&cam1.center, &(p.position / range)).unwrap();
        if ((range - truth) / truth).abs() < 0.05 {
            good += 1;
        }
    }
    let frac = good as f64 / cloud.len() as f64;
    eprintln!(
        "valid {} of {}, within 5%: {:.3}",
        cloud.len(),
        disp.data.len(),
        frac
    );
    assert!(frac >= 0.8);
}
