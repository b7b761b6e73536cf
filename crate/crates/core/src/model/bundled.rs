//! Models compiled into the library.

use super::{parse_model, ModelError, RobotModel};

pub const BUNDLED_NAMES: [&str; 4] = ["pendulum", "double_pendulum", "fourbar", "minibiped"];

/// Loads one of the compiled-in models by name.
pub fn bundled_model(name: &str) -> Result<RobotModel, ModelError> {
    let text = match name {
        "pendulum" => include_str!("../../models/pendulum.model"),
        "double_pendulum" => include_str!("../../models/double_pendulum.model"),
        "fourbar" => include_str!("../../models/fourbar.model"),
        "minibiped" => include_str!("../../models/minibiped.model"),
        other => return Err(ModelError::UnknownBundled(other.to_string())),
    };
    parse_model(text, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{serialize_model, Side};

    #[test]
    fn all_bundled_models_load() {
        for name in BUNDLED_NAMES {
            let m = bundled_model(name).unwrap();
            assert_eq!(m.name, name);
        }
    }

    #[test]
    fn bundled_models_round_trip() {
        for name in BUNDLED_NAMES {
            let m1 = bundled_model(name).unwrap();
            let m2 = parse_model(&serialize_model(&m1), name).unwrap();
            assert_eq!(m1, m2, "{name} did not round-trip");
        }
    }

    #[test]
    fn minibiped_counts() {
        let m = bundled_model("minibiped").unwrap();
        assert_eq!(m.nq(), 22);
        assert_eq!(m.na(), 12);
        assert_eq!(m.nu(), 10);
        assert_eq!(m.closure_rows(), 4);
        assert!(m.fully_actuated_in_stance);
        assert!(m.contact(Side::Left).is_some());
        assert!(m.contact(Side::Right).is_some());
        let base = m.base_coords().unwrap();
        assert_eq!(base.x, 0);
        assert_eq!(base.roll, 5);
        // Swapping legs twice is the identity on a random vector.
        let q = nalgebra::DVector::from_fn(22, |i, _| (i as f64 * 0.37).sin());
        let s = m.swap_legs(&q).unwrap();
        assert_eq!(m.swap_legs(&s).unwrap(), q);
        // Left hip yaw maps onto right hip yaw with a sign flip.
        let l_hip_yaw = m.coords().iter().position(|c| c.name == "l_hip_yaw").unwrap();
        let r_hip_yaw = m.coords().iter().position(|c| c.name == "r_hip_yaw").unwrap();
        let mut q = nalgebra::DVector::zeros(22);
        q[l_hip_yaw] = 0.25;
        let s = m.swap_legs(&q).unwrap();
        assert_eq!(s[r_hip_yaw], -0.25);
        assert_eq!(s[l_hip_yaw], 0.0);
    }

    #[test]
    fn fourbar_counts() {
        let m = bundled_model("fourbar").unwrap();
        assert_eq!(m.nq(), 3);
        assert_eq!(m.na(), 1);
        assert_eq!(m.nu(), 2);
        assert_eq!(m.closure_rows(), 2);
        assert!(!m.fully_actuated_in_stance);
        assert!(m.base_coords().is_none());
    }
}
