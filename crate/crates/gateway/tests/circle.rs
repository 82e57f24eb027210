//! Operator leader targets streamed at 30 Hz along a circle, at alpha = 2.
//! The follower must trace the circle scaled by alpha about the task centre.

use nalgebra::Vector3;

use copilot_core::config::ExperimentConfig;
use copilot_gateway::live::Controller;
use copilot_gateway::protocol::InboundMsg;

#[test]
fn follower_traces_scaled_circle() {
    let setup = ExperimentConfig::default().setup().unwrap();
    let mut c = Controller::new(&setup, None, 11).unwrap();
    let alpha = 2.0;
    let c_l = c.session().wm.leader_center();
    let c_t = c.session().wm.task_center();
    c.apply(&InboundMsg::SetScale {
        alpha,
        c_l: c_l.into(),
        c_t: c_t.into(),
    })
    .unwrap();

    let r_l = 0.02;
    let period = 12.0;
    let ramp = 1.5;
    let settle = 2.0;
    let dt = setup.session.dt;
    let send_every = (1.0 / (30.0 * dt)).round() as u64;
    let start = c.session().leader_ee().unwrap().position;
    let circle = |t: f64| {
        let a = 2.0 * std::f64::consts::PI * t / period;
        c_l + r_l * Vector3::new(a.cos(), a.sin(), 0.0)
    };

    let mut worst: f64 = 0.0;
    let mut samples = 0;
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    let total = ramp + settle + period;
    let mut k = 0u64;
    while c.session().t() < total {
        if k % send_every == 0 {
            let t = c.session().t();
            let x = if t < ramp {
                start + (circle(0.0) - start) * (t / ramp)
            } else if t < ramp + settle {
                circle(0.0)
            } else {
                circle(t - ramp - settle)
            };
            c.apply(&InboundMsg::LeaderTarget {
                position: x.into(),
                orientation: [1.0, 0.0, 0.0, 0.0],
            })
            .unwrap();
        }
        c.tick().unwrap();
        k += 1;
        if c.session().t() > ramp + settle {
            let d = c.session().follower_ee().position - c_t;
            let radial = (d.x.hypot(d.y) - alpha * r_l).abs();
            worst = worst.max(radial).max(d.z.abs());
            samples += 1;
            lo = lo.inf(&d);
            hi = hi.sup(&d);
        }
    }
    assert!(samples > 1000);
    // the whole circle was traced
    let span = hi - lo;
    assert!(span.x > 3.9 * r_l && span.y > 3.9 * r_l, "span {span:?}");
    println!("max radial error {:.3} mm over {samples} ticks", worst * 1e3);
    assert!(worst < 2e-3, "max radial error {worst}");
}
