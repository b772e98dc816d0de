//! Small fixed-size linear algebra used throughout: 3-vectors, row-major
//! 3x3 matrices and the rotation log/exp maps needed for geodesic
//! interpolation.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn neg(a: Vec3) -> Vec3 {
    [-a[0], -a[1], -a[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

pub fn column(a: &Mat3, j: usize) -> Vec3 {
    [a[0][j], a[1][j], a[2][j]]
}

pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
    [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]]
}

/// Max-abs deviation of `qᵀq` from identity, plus `|det q - 1|`.
pub fn rotation_error(q: &Mat3) -> f64 {
    let qtq = mat_mul(&transpose(q), q);
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((qtq[i][j] - target).abs());
        }
    }
    err.max((det(q) - 1.0).abs())
}

pub fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut e: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            e = e.max((a[i][j] - b[i][j]).abs());
        }
    }
    e
}

/// Gram-Schmidt on two column vectors; the third column is their cross product.
pub fn orthonormalize(c0: Vec3, c1: Vec3) -> Mat3 {
    let a = normalize(c0);
    let b = normalize(sub(c1, scale(a, dot(a, c1))));
    from_columns(a, b, cross(a, b))
}

fn skew(w: Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Rodrigues formula for the rotation by `|w|` about `w`.
pub fn exp_so3(w: Vec3) -> Mat3 {
    let theta = norm(w);
    if theta < 1e-12 {
        let k = skew(w);
        let mut out = IDENTITY3;
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] += k[i][j];
            }
        }
        return out;
    }
    let k = skew(scale(w, 1.0 / theta));
    let k2 = mat_mul(&k, &k);
    let (s, c) = theta.sin_cos();
    let mut out = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    out
}

/// Rotation vector of `r` (axis times angle, angle in [0, π]).
pub fn log_so3(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-9 {
        return [
            (r[2][1] - r[1][2]) / 2.0,
            (r[0][2] - r[2][0]) / 2.0,
            (r[1][0] - r[0][1]) / 2.0,
        ];
    }
    if std::f64::consts::PI - theta < 1e-3 {
        // Near π the antisymmetric part vanishes; the symmetric part is
        // cos θ I + (1 - cos θ) a aᵀ, whose largest column gives the axis up
        // to sign. The sign comes from whatever antisymmetric part remains.
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (r[i][j] + r[j][i]) / 2.0 - if i == j { cos } else { 0.0 };
            }
        }
        let mut best = 0;
        let mut best_n = 0.0;
        for j in 0..3 {
            let n = norm(column(&b, j));
            if n > best_n {
                best_n = n;
                best = j;
            }
        }
        let mut axis = normalize(column(&b, best));
        let anti = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
        if dot(axis, anti) < 0.0 {
            axis = neg(axis);
        }
        return scale(axis, theta);
    }
    let s = 2.0 * theta.sin();
    [
        (r[2][1] - r[1][2]) * theta / s,
        (r[0][2] - r[2][0]) * theta / s,
        (r[1][0] - r[0][1]) * theta / s,
    ]
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}
