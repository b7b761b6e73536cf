//! Text format for robot models.
//!
//! One directive per line; `#` starts a comment; attributes are `key=value`
//! with comma-separated numbers inside a value. Directives:
//!
//! ```text
//! body <name> mass=<f> com=<x,y,z> inertia=<ixx,iyy,izz,ixy,ixz,iyz>
//! joint <name> type=<revolute|prismatic|floating6|fixed> parent=<body|world> child=<body>
//!       [origin=<x,y,z,roll,pitch,yaw>] [axis=<x,y,z>] [limits=<lo,hi>]
//!       [vmax=<f>] [taumax=<f>] [actuated=<true|false>]
//! closure <name> type=<point3|planar_point2|pin5> parent=<body> parent_point=<x,y,z>
//!       child=<body> child_point=<x,y,z> [normal=<x,y,z>]
//! contact <left|right> body=<body> frame=<x,y,z,roll,pitch,yaw> la=<f> lb=<f> mu=<f> gamma=<f>
//! symmetry swap=<i>:<j>:<s>,...
//! flag fully_actuated_in_stance
//! ```
//!
//! Joint `origin` is the transform from the parent body frame to the joint
//! frame, position plus roll/pitch/yaw composed as Rz(yaw)·Ry(pitch)·Rx(roll).
//! Bodies must be declared before the joints and closures that reference
//! them. `serialize_model` writes floats with the shortest representation
//! that reloads to the same value, so parse → serialize → parse is exact.

use super::*;
use std::collections::HashMap;

struct LineCtx {
    line: usize,
}

impl LineCtx {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ModelError> {
        Err(ModelError::Parse {
            line: self.line,
            msg: msg.into(),
        })
    }
}

fn parse_f64(cx: &LineCtx, s: &str) -> Result<f64, ModelError> {
    s.parse::<f64>()
        .map_err(|_| ModelError::Parse {
            line: cx.line,
            msg: format!("invalid number `{s}`"),
        })
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                cx.err(format!("non-finite number `{s}`"))
            }
        })
}

fn parse_floats<const N: usize>(cx: &LineCtx, s: &str) -> Result<[f64; N], ModelError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return cx.err(format!("expected {N} comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_f64(cx, p)?;
    }
    Ok(out)
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Splits `key=value` tokens into a map, rejecting duplicates and stray text.
fn attr_map<'a>(cx: &LineCtx, tokens: &[&'a str]) -> Result<HashMap<&'a str, &'a str>, ModelError> {
    let mut map = HashMap::new();
    for t in tokens {
        let Some((k, v)) = t.split_once('=') else {
            return cx.err(format!("expected key=value, got `{t}`"));
        };
        if map.insert(k, v).is_some() {
            return cx.err(format!("duplicate attribute `{k}`"));
        }
    }
    Ok(map)
}

fn take<'a>(
    cx: &LineCtx,
    map: &mut HashMap<&str, &'a str>,
    key: &str,
) -> Result<&'a str, ModelError> {
    map.remove(key)
        .ok_or_else(|| ModelError::Parse {
            line: cx.line,
            msg: format!("missing attribute `{key}`"),
        })
}

fn finish(cx: &LineCtx, map: HashMap<&str, &str>) -> Result<(), ModelError> {
    if let Some(k) = map.keys().next() {
        return cx.err(format!("unknown attribute `{k}`"));
    }
    Ok(())
}

pub fn parse_model(text: &str, name: &str) -> Result<RobotModel, ModelError> {
    let mut bodies: Vec<Body> = Vec::new();
    let mut joints: Vec<Joint> = Vec::new();
    let mut closures: Vec<LoopClosure> = Vec::new();
    let mut contacts: Vec<ContactPatch> = Vec::new();
    let mut symmetry: Option<Vec<(usize, usize, f64)>> = None;
    let mut fully_actuated = false;

    let body_idx = |bodies: &[Body], cx: &LineCtx, n: &str| -> Result<usize, ModelError> {
        bodies
            .iter()
            .position(|b| b.name == n)
            .ok_or_else(|| ModelError::Parse {
                line: cx.line,
                msg: format!("unknown body `{n}`"),
            })
    };

    for (lineno, raw) in text.lines().enumerate() {
        let cx = LineCtx { line: lineno + 1 };
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        match tokens[0] {
            "body" => {
                if tokens.len() < 2 {
                    return cx.err("body needs a name");
                }
                let mut map = attr_map(&cx, &tokens[2..])?;
                let mass = parse_f64(&cx, take(&cx, &mut map, "mass")?)?;
                let com = vec3(parse_floats::<3>(&cx, take(&cx, &mut map, "com")?)?);
                let i = parse_floats::<6>(&cx, take(&cx, &mut map, "inertia")?)?;
                finish(&cx, map)?;
                let inertia = Matrix3::new(
                    i[0], i[3], i[4], //
                    i[3], i[1], i[5], //
                    i[4], i[5], i[2],
                );
                bodies.push(Body {
                    name: tokens[1].to_string(),
                    mass,
                    com,
                    inertia,
                });
            }
            "joint" => {
                if tokens.len() < 2 {
                    return cx.err("joint needs a name");
                }
                let mut map = attr_map(&cx, &tokens[2..])?;
                let kind = match take(&cx, &mut map, "type")? {
                    "revolute" => JointKind::Revolute,
                    "prismatic" => JointKind::Prismatic,
                    "floating6" => JointKind::Floating6,
                    "fixed" => JointKind::Fixed,
                    other => return cx.err(format!("unknown joint type `{other}`")),
                };
                let parent = match take(&cx, &mut map, "parent")? {
                    "world" => BodyRef::World,
                    n => BodyRef::Body(body_idx(&bodies, &cx, n)?),
                };
                let child = body_idx(&bodies, &cx, take(&cx, &mut map, "child")?)?;
                let (origin_pos, origin_rpy) = match map.remove("origin") {
                    Some(v) => {
                        let o = parse_floats::<6>(&cx, v)?;
                        (vec3([o[0], o[1], o[2]]), vec3([o[3], o[4], o[5]]))
                    }
                    None => (Vector3::zeros(), Vector3::zeros()),
                };
                let axis = match map.remove("axis") {
                    Some(v) => {
                        let a = vec3(parse_floats::<3>(&cx, v)?);
                        let n = a.norm();
                        if n <= 1e-12 {
                            return cx.err("axis must be nonzero");
                        }
                        // Normalize on load, but leave already-unit axes
                        // untouched so serialization round-trips exactly.
                        if (n - 1.0).abs() > 1e-12 {
                            a / n
                        } else {
                            a
                        }
                    }
                    None => {
                        if matches!(kind, JointKind::Revolute | JointKind::Prismatic) {
                            return cx.err("revolute/prismatic joints need axis=<x,y,z>");
                        }
                        Vector3::zeros()
                    }
                };
                let limits = match map.remove("limits") {
                    Some(v) => {
                        let l = parse_floats::<2>(&cx, v)?;
                        Some((l[0], l[1]))
                    }
                    None => None,
                };
                let vmax = map.remove("vmax").map(|v| parse_f64(&cx, v)).transpose()?;
                let taumax = map.remove("taumax").map(|v| parse_f64(&cx, v)).transpose()?;
                let actuated = match map.remove("actuated") {
                    Some("true") => true,
                    Some("false") | None => false,
                    Some(other) => return cx.err(format!("actuated must be true|false, got `{other}`")),
                };
                finish(&cx, map)?;
                joints.push(Joint {
                    name: tokens[1].to_string(),
                    kind,
                    parent,
                    child,
                    origin: origin_frame(
                        origin_pos.x,
                        origin_pos.y,
                        origin_pos.z,
                        origin_rpy.x,
                        origin_rpy.y,
                        origin_rpy.z,
                    ),
                    origin_pos,
                    origin_rpy,
                    axis,
                    limits,
                    vmax,
                    taumax,
                    actuated,
                });
            }
            "closure" => {
                if tokens.len() < 2 {
                    return cx.err("closure needs a name");
                }
                let mut map = attr_map(&cx, &tokens[2..])?;
                let kind = match take(&cx, &mut map, "type")? {
                    "point3" => ClosureKind::Point3,
                    "planar_point2" => ClosureKind::PlanarPoint2,
                    "pin5" => ClosureKind::Pin5,
                    other => return cx.err(format!("unknown closure type `{other}`")),
                };
                let parent_body = body_idx(&bodies, &cx, take(&cx, &mut map, "parent")?)?;
                let parent_point = vec3(parse_floats::<3>(&cx, take(&cx, &mut map, "parent_point")?)?);
                let child_body = body_idx(&bodies, &cx, take(&cx, &mut map, "child")?)?;
                let child_point = vec3(parse_floats::<3>(&cx, take(&cx, &mut map, "child_point")?)?);
                let normal = map
                    .remove("normal")
                    .map(|v| parse_floats::<3>(&cx, v).map(vec3))
                    .transpose()?;
                finish(&cx, map)?;
                closures.push(LoopClosure {
                    name: tokens[1].to_string(),
                    kind,
                    parent_body,
                    parent_point,
                    child_body,
                    child_point,
                    normal,
                });
            }
            "contact" => {
                if tokens.len() < 2 {
                    return cx.err("contact needs a side (left|right)");
                }
                let side: Side = tokens[1]
                    .parse()
                    .map_err(|e: String| ModelError::Parse { line: cx.line, msg: e })?;
                let mut map = attr_map(&cx, &tokens[2..])?;
                let body = body_idx(&bodies, &cx, take(&cx, &mut map, "body")?)?;
                let f = parse_floats::<6>(&cx, take(&cx, &mut map, "frame")?)?;
                let la = parse_f64(&cx, take(&cx, &mut map, "la")?)?;
                let lb = parse_f64(&cx, take(&cx, &mut map, "lb")?)?;
                let mu = parse_f64(&cx, take(&cx, &mut map, "mu")?)?;
                let gamma = parse_f64(&cx, take(&cx, &mut map, "gamma")?)?;
                finish(&cx, map)?;
                contacts.push(ContactPatch {
                    side,
                    body,
                    frame: origin_frame(f[0], f[1], f[2], f[3], f[4], f[5]),
                    frame_pos: vec3([f[0], f[1], f[2]]),
                    frame_rpy: vec3([f[3], f[4], f[5]]),
                    la,
                    lb,
                    mu,
                    gamma,
                });
            }
            "symmetry" => {
                if symmetry.is_some() {
                    return cx.err("duplicate symmetry directive");
                }
                let mut map = attr_map(&cx, &tokens[1..])?;
                let spec = take(&cx, &mut map, "swap")?;
                finish(&cx, map)?;
                let mut entries = Vec::new();
                for item in spec.split(',') {
                    let parts: Vec<&str> = item.split(':').collect();
                    if parts.len() != 3 {
                        return cx.err(format!("swap entry must be i:j:s, got `{item}`"));
                    }
                    let i: usize = parts[0]
                        .parse()
                        .map_err(|_| ModelError::Parse {
                            line: cx.line,
                            msg: format!("invalid index `{}`", parts[0]),
                        })?;
                    let j: usize = parts[1]
                        .parse()
                        .map_err(|_| ModelError::Parse {
                            line: cx.line,
                            msg: format!("invalid index `{}`", parts[1]),
                        })?;
                    let s = parse_f64(&cx, parts[2])?;
                    entries.push((i, j, s));
                }
                symmetry = Some(entries);
            }
            "flag" => {
                if tokens.len() != 2 {
                    return cx.err("flag takes exactly one name");
                }
                match tokens[1] {
                    "fully_actuated_in_stance" => fully_actuated = true,
                    other => return cx.err(format!("unknown flag `{other}`")),
                }
            }
            other => return cx.err(format!("unknown directive `{other}`")),
        }
    }

    RobotModel::assemble(
        name.to_string(),
        bodies,
        joints,
        closures,
        contacts,
        symmetry,
        fully_actuated,
    )
}

/// Formats a float with the shortest representation that parses back to the
/// same value (Rust's default float display).
fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_list(vals: &[f64]) -> String {
    vals.iter().map(|&v| fmt_f(v)).collect::<Vec<_>>().join(",")
}

pub fn serialize_model(m: &RobotModel) -> String {
    let mut out = String::new();
    let body_name = |r: usize| m.bodies[r].name.as_str();
    for b in &m.bodies {
        let i = &b.inertia;
        out.push_str(&format!(
            "body {} mass={} com={} inertia={}\n",
            b.name,
            fmt_f(b.mass),
            fmt_list(&[b.com.x, b.com.y, b.com.z]),
            fmt_list(&[
                i[(0, 0)],
                i[(1, 1)],
                i[(2, 2)],
                i[(0, 1)],
                i[(0, 2)],
                i[(1, 2)]
            ]),
        ));
    }
    for j in &m.joints {
        let kind = match j.kind {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Floating6 => "floating6",
            JointKind::Fixed => "fixed",
        };
        let parent = match j.parent {
            BodyRef::World => "world",
            BodyRef::Body(p) => body_name(p),
        };
        out.push_str(&format!(
            "joint {} type={kind} parent={parent} child={}",
            j.name,
            body_name(j.child)
        ));
        if j.origin_pos != Vector3::zeros() || j.origin_rpy != Vector3::zeros() {
            out.push_str(&format!(
                " origin={}",
                fmt_list(&[
                    j.origin_pos.x,
                    j.origin_pos.y,
                    j.origin_pos.z,
                    j.origin_rpy.x,
                    j.origin_rpy.y,
                    j.origin_rpy.z
                ])
            ));
        }
        if matches!(j.kind, JointKind::Revolute | JointKind::Prismatic) {
            out.push_str(&format!(" axis={}", fmt_list(&[j.axis.x, j.axis.y, j.axis.z])));
        }
        if let Some((lo, hi)) = j.limits {
            out.push_str(&format!(" limits={}", fmt_list(&[lo, hi])));
        }
        if let Some(v) = j.vmax {
            out.push_str(&format!(" vmax={}", fmt_f(v)));
        }
        if let Some(t) = j.taumax {
            out.push_str(&format!(" taumax={}", fmt_f(t)));
        }
        if j.actuated {
            out.push_str(" actuated=true");
        }
        out.push('\n');
    }
    for c in &m.closures {
        let kind = match c.kind {
            ClosureKind::Point3 => "point3",
            ClosureKind::PlanarPoint2 => "planar_point2",
            ClosureKind::Pin5 => "pin5",
        };
        out.push_str(&format!(
            "closure {} type={kind} parent={} parent_point={} child={} child_point={}",
            c.name,
            body_name(c.parent_body),
            fmt_list(&[c.parent_point.x, c.parent_point.y, c.parent_point.z]),
            body_name(c.child_body),
            fmt_list(&[c.child_point.x, c.child_point.y, c.child_point.z]),
        ));
        if let Some(n) = c.normal {
            out.push_str(&format!(" normal={}", fmt_list(&[n.x, n.y, n.z])));
        }
        out.push('\n');
    }
    for c in &m.contacts {
        out.push_str(&format!(
            "contact {} body={} frame={} la={} lb={} mu={} gamma={}\n",
            c.side.name(),
            body_name(c.body),
            fmt_list(&[
                c.frame_pos.x,
                c.frame_pos.y,
                c.frame_pos.z,
                c.frame_rpy.x,
                c.frame_rpy.y,
                c.frame_rpy.z
            ]),
            fmt_f(c.la),
            fmt_f(c.lb),
            fmt_f(c.mu),
            fmt_f(c.gamma),
        ));
    }
    if let Some(sym) = &m.symmetry {
        // Emit each two-cycle (and sign-flipped fixed point) once, from the
        // smaller index.
        let mut items = Vec::new();
        for i in 0..sym.perm.len() {
            let j = sym.perm[i];
            let s = sym.sign[i];
            if j == i && s == 1.0 {
                continue;
            }
            if i <= j {
                items.push(format!("{i}:{j}:{}", fmt_f(s)));
            }
        }
        if !items.is_empty() {
            out.push_str(&format!("symmetry swap={}\n", items.join(",")));
        }
    }
    if m.fully_actuated_in_stance {
        out.push_str("flag fully_actuated_in_stance\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two-link chain with a closure
body upper mass=1.5 com=0,0,-0.1 inertia=0.01,0.01,0.002,0,0,0
body lower mass=0.8 com=0,0,-0.12 inertia=0.008,0.008,0.001,0,0,0
joint shoulder type=revolute parent=world child=upper axis=0,1,0 limits=-1.5,1.5 taumax=40 actuated=true
joint elbow type=revolute parent=upper child=lower origin=0,0,-0.25,0,0,0 axis=0,1,0 limits=-2,2 vmax=10
";

    #[test]
    fn parses_bodies_and_joints() {
        let m = parse_model(SAMPLE, "chain").unwrap();
        assert_eq!(m.bodies.len(), 2);
        assert_eq!(m.joints.len(), 2);
        assert_eq!(m.nq(), 2);
        assert_eq!(m.na(), 1);
        assert_eq!(m.actuated_idx(), &[0]);
        assert_eq!(m.unactuated_idx(), &[1]);
        let elbow = &m.joints[1];
        assert_eq!(elbow.parent, BodyRef::Body(0));
        assert_eq!(elbow.origin_pos, Vector3::new(0.0, 0.0, -0.25));
        assert_eq!(elbow.limits, Some((-2.0, 2.0)));
        assert_eq!(elbow.vmax, Some(10.0));
        assert!(!elbow.actuated);
    }

    #[test]
    fn round_trips_exactly() {
        let m1 = parse_model(SAMPLE, "chain").unwrap();
        let text = serialize_model(&m1);
        let m2 = parse_model(&text, "chain").unwrap();
        assert_eq!(m1, m2);
        // And serialization is a fixed point.
        assert_eq!(text, serialize_model(&m2));
    }

    #[test]
    fn reports_line_numbers() {
        let bad = "body a mass=1 com=0,0,0 inertia=1,1,1,0,0,0\njoint j type=revolute parent=world child=b axis=0,0,1\n";
        match parse_model(bad, "bad") {
            Err(ModelError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown body"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_attribute() {
        let bad = "body a mass=1 com=0,0,0 inertia=1,1,1,0,0,0 bogus=3\n";
        match parse_model(bad, "bad") {
            Err(ModelError::Parse { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validates_inertia_triangle_inequality() {
        // iz > ix + iy is not realizable by any rigid body.
        let bad = "body a mass=1 com=0,0,0 inertia=0.1,0.1,0.5,0,0,0\n\
                   joint j type=revolute parent=world child=a axis=0,0,1 taumax=1 actuated=true\n";
        match parse_model(bad, "bad") {
            Err(ModelError::Invalid(msg)) => assert!(msg.contains("triangle"), "{msg}"),
            other => panic!("expected invalid-model error, got {other:?}"),
        }
    }

    #[test]
    fn symmetry_must_be_involution() {
        let base = "body a mass=1 com=0,0,0 inertia=0.01,0.01,0.01,0,0,0
body b mass=1 com=0,0,0 inertia=0.01,0.01,0.01,0,0,0
body c mass=1 com=0,0,0 inertia=0.01,0.01,0.01,0,0,0
joint ja type=revolute parent=world child=a axis=0,1,0
joint jb type=revolute parent=world child=b axis=0,1,0
joint jc type=revolute parent=world child=c axis=0,1,0
";
        // Fine: swap 0 and 1 with sign -1, flip 2.
        let good = format!("{base}symmetry swap=0:1:-1,2:2:-1\n");
        let m = parse_model(&good, "sym").unwrap();
        let table = m.symmetry.as_ref().unwrap();
        let q = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let s = table.apply(&q);
        assert_eq!(s, DVector::from_vec(vec![0.2, -0.3, -0.9]));
        assert_eq!(table.apply(&s), q);

        // Bad: 0 -> 1 and 1 -> 2 is not an involution.
        let bad = format!("{base}symmetry swap=0:1:1,1:2:1\n");
        assert!(matches!(parse_model(&bad, "sym"), Err(ModelError::Invalid(_))));
    }
}
