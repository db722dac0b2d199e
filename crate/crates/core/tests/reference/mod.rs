//! Straight-line reference of the trajectory simplification procedure,
//! written from the step list rather than from the library code.

#![allow(dead_code)]

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pt {
    pub x: f64,
    pub y: f64,
    pub mag: usize,
    pub t: f64,
}

fn angle_at(a: Pt, p: Pt, b: Pt) -> f64 {
    let (ux, uy) = (p.x - a.x, p.y - a.y);
    let (vx, vy) = (b.x - p.x, b.y - p.y);
    let nu = (ux * ux + uy * uy).sqrt();
    let nv = (vx * vx + vy * vy).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0).acos()
}

/// One pass: per magnification run, angle/time filter then prose-intent
/// dispersion merge. `th_d[m]` is the distance threshold at level m.
pub fn pass(s: &[Pt], th_a: f64, th_t: f64, th_d: &[f64; 6]) -> Vec<Pt> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1].mag == s[i].mag {
            j += 1;
        }
        // angle / time filter
        let mut kept = vec![s[i]];
        let mut p = i + 1;
        while p < j {
            if angle_at(s[p - 1], s[p], s[p + 1]) > th_a && s[p].t > th_t {
                kept.push(s[p]);
            }
            p += 1;
        }
        if j > i {
            kept.push(s[j]);
        }
        // dispersion merge
        if kept.len() == 1 {
            out.push(kept[0]);
        } else {
            let d = th_d[s[i].mag];
            let mut frag: Vec<Pt> = vec![kept[0]];
            let mut temp = kept[0].t;
            for q in 1..kept.len() - 1 {
                let last = frag[frag.len() - 1];
                let dist = ((kept[q].x - last.x).powi(2) + (kept[q].y - last.y).powi(2)).sqrt();
                if dist < d {
                    temp += kept[q].t;
                } else {
                    let n = frag.len();
                    frag[n - 1].t = temp;
                    frag.push(kept[q]);
                    temp = kept[q].t;
                }
            }
            let n = frag.len();
            frag[n - 1].t = temp;
            frag.push(kept[kept.len() - 1]);
            out.extend(frag);
        }
        i = j + 1;
    }
    out
}

/// Full procedure with threshold escalation by 1.5 until the cap holds or
/// only run endpoints remain.
pub fn simplify(s: &[Pt], th_a: f64, th_t: f64, th_d: &[f64; 6], cap: usize) -> Vec<Pt> {
    let mut floor = 0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1].mag == s[i].mag {
            j += 1;
        }
        floor += if j > i { 2 } else { 1 };
        i = j + 1;
    }
    let (mut t, mut d) = (th_t, *th_d);
    let mut out = pass(s, th_a, t, &d);
    while out.len() > cap && out.len() > floor {
        t *= 1.5;
        for v in d.iter_mut() {
            *v *= 1.5;
        }
        out = pass(s, th_a, t, &d);
    }
    out
}
