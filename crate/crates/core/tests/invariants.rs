use std::sync::Arc;

use dgff_core::fields::{gibbs, sample_dgff};
use dgff_core::greens::{green_and_factor, green_exact, DEFAULT_DENSE_CAP};
use dgff_core::limitproc::{
    pd_weights, perturbed_inner_product_exact, q_value, rational, sample_ppp, DiscreteLaw, ENUMERATION_BUDGET,
};
use dgff_core::overlap::OverlapSetup;
use dgff_core::stats::ks_statistic;
use dgff_core::{DomainSpec, FieldModel, FieldSample, Lattice, SeedSource, Site, BETA_C};
use num_rational::BigRational;
use proptest::prelude::*;

/// Connected site sets grown from the origin by a list of (parent, direction) choices.
fn cluster() -> impl Strategy<Value = Vec<Site>> {
    prop::collection::vec((any::<prop::sample::Index>(), 0usize..4), 0..30).prop_map(|steps| {
        let mut sites: Vec<Site> = vec![(0, 0)];
        for (parent, dir) in steps {
            let (x, y) = *parent.get(&sites);
            let (dx, dy) = [(1, 0), (-1, 0), (0, 1), (0, -1)][dir];
            if !sites.contains(&(x + dx, y + dy)) {
                sites.push((x + dx, y + dy));
            }
        }
        sites
    })
}

fn lattice(sites: &[Site]) -> Arc<Lattice> {
    Arc::new(Lattice::from_sites(DomainSpec::UnitSquare, 1, sites.to_vec()))
}

fn decreasing_rationals(raw: Vec<u8>) -> Vec<BigRational> {
    let mut v: Vec<i64> = raw.into_iter().map(i64::from).collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.into_iter().map(|x| rational(x, 1)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn green_is_symmetric_positive_and_harmonic(s in cluster()) {
        let lat = lattice(&s);
        let g = green_exact(&lat, DEFAULT_DENSE_CAP).unwrap();
        for x in 0..lat.len() {
            prop_assert!(g.get(x, x) >= 1.0);
            for y in 0..lat.len() {
                prop_assert!(g.get(x, y) > 0.0);
                prop_assert!((g.get(x, y) - g.get(y, x)).abs() <= 1e-12 * g.max_diag());
                prop_assert!(g.get(x, y) <= g.get(x, x) + 1e-12);
            }
        }
        prop_assert!(g.harmonicity_residual() < 1e-10);
    }

    #[test]
    fn green_grows_with_the_domain(s in cluster(), extra in 0usize..4) {
        let small = lattice(&s);
        let mut bigger = s.clone();
        let (x, y) = s[s.len() - 1];
        let (dx, dy) = [(1, 0), (-1, 0), (0, 1), (0, -1)][extra];
        bigger.push((x + dx, y + dy));
        let big = lattice(&bigger);
        let (gs, gb) = (green_exact(&small, DEFAULT_DENSE_CAP).unwrap(), green_exact(&big, DEFAULT_DENSE_CAP).unwrap());
        for i in 0..small.len() {
            for j in 0..small.len() {
                let (bi, bj) = (big.index_of(small.site(i)).unwrap(), big.index_of(small.site(j)).unwrap());
                prop_assert!(gb.get(bi, bj) >= gs.get(i, j) - 1e-12);
            }
        }
    }

    #[test]
    fn factor_reproduces_green(s in cluster()) {
        let lat = lattice(&s);
        let (g, chol) = green_and_factor(&lat, DEFAULT_DENSE_CAP).unwrap();
        prop_assert!(chol.reconstruction_error(&g) < 1e-10);
    }

    #[test]
    fn overlaps_lie_in_unit_interval(s in cluster()) {
        let setup = OverlapSetup::from_lattice(lattice(&s), DEFAULT_DENSE_CAP).unwrap();
        let n = setup.lattice.len();
        for x in 0..n {
            for y in 0..n {
                let q = setup.overlap(FieldModel::Dgff, x, y);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&q));
                prop_assert_eq!(setup.overlap(FieldModel::Rem, x, y), f64::from(u8::from(x == y)));
            }
        }
    }

    #[test]
    fn gibbs_weights_normalise_and_bound_log_z(s in cluster(), beta in 0.0f64..20.0, seed in any::<u64>()) {
        let lat = lattice(&s);
        let (_, chol) = green_and_factor(&lat, DEFAULT_DENSE_CAP).unwrap();
        let f: FieldSample = sample_dgff(&chol, &mut SeedSource::new(seed).stream("field", 0));
        let w = gibbs(&f, beta).unwrap();
        let total: f64 = w.probabilities().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let top = beta * f.max();
        prop_assert!(w.log_z >= top - 1e-12);
        prop_assert!(w.log_z <= top + (lat.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn pd_weights_are_a_sorted_probability_vector(seed in any::<u64>(), level in 0.5f64..4.0, k in 1.05f64..4.0) {
        let c = sample_ppp(level, &mut SeedSource::new(seed).stream("ppp", 0)).unwrap();
        prop_assume!(!c.is_empty());
        let w = pd_weights(&c, k * BETA_C).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(c.atoms.iter().all(|&a| a >= -level));
    }

    #[test]
    fn q_is_a_symmetric_shift_invariant_probability(
        atoms in prop::collection::vec((-5.0f64..5.0, -2.0f64..0.0, -2.0f64..0.0), 1..8),
        shift in -3.0f64..3.0,
        b in 3.0f64..10.0,
        bp in 3.0f64..10.0,
    ) {
        let q = q_value(&atoms, b, bp);
        prop_assert!((0.0..=1.0).contains(&q));
        let mut rev = atoms.clone();
        rev.reverse();
        prop_assert!((q_value(&rev, b, bp) - q).abs() < 1e-12);
        let moved: Vec<_> = atoms.iter().map(|&(xi, x, y)| (xi + shift, x, y)).collect();
        prop_assert!((q_value(&moved, b, bp) - q).abs() < 1e-10);
        prop_assert!((q_value(&atoms, b, bp) - q_value(&atoms.iter().map(|&(xi, y, x)| (xi, x, y)).collect::<Vec<_>>(), bp, b)).abs() < 1e-12);
    }

    #[test]
    fn random_multipliers_never_raise_the_inner_product(
        p_raw in prop::collection::vec(1u8..6, 1..5),
        q_raw in prop::collection::vec(0u8..4, 5),
        law in prop::collection::vec((1i64..5, 1i64..4), 1..4),
    ) {
        let p = decreasing_rationals(p_raw);
        let total: BigRational = p.iter().sum();
        let p: Vec<BigRational> = p.iter().map(|x| x / &total).collect();
        let q = decreasing_rationals(q_raw[..p.len()].to_vec());
        let mass: i64 = law.iter().map(|l| l.1).sum();
        let a = DiscreteLaw {
            values: law.iter().map(|l| rational(l.0, 1)).collect(),
            probs: law.iter().map(|l| rational(l.1, mass)).collect(),
        };
        let r = perturbed_inner_product_exact(&p, &q, &a, ENUMERATION_BUDGET).unwrap();
        prop_assert!(r.expectation <= r.baseline);
    }

    #[test]
    fn ks_statistic_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let d = ks_statistic(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_statistic(&b, &a));
        prop_assert_eq!(ks_statistic(&a, &a), 0.0);
    }

    #[test]
    fn streams_depend_only_on_seed_tag_and_index(seed in any::<u64>(), i in 0u64..1000) {
        use rand::Rng;
        let s = SeedSource::new(seed);
        let x: u64 = s.stream("t", i).random();
        let y: u64 = SeedSource::new(seed).stream("t", i).random();
        let z: u64 = s.stream("t", i + 1).random();
        prop_assert_eq!(x, y);
        prop_assert_ne!(x, z);
    }
}
