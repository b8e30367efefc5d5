mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use urbanvit::geo::{intersection_area, polygon_area, Point, Polygon};
use urbanvit::layers::District;
use urbanvit::raster::{
    assign_imagelets, decode_geotiff, encode_geotiff, tile_imagelets, GeoRaster, GeoTransform, TILE,
};

fn random_raster(seed: u64, w: usize, h: usize, px: f64) -> GeoRaster {
    let mut r = rng(seed);
    let pixels = (0..w * h * 3).map(|_| r.random()).collect();
    let t = GeoTransform {
        origin_x: 500_000.0,
        origin_y: 5_030_000.0,
        pixel_size_x: px,
        pixel_size_y: px,
    };
    GeoRaster::new(w, h, pixels, t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tiles_partition_the_raster(seed in any::<u64>(), w in 64usize..300, h in 64usize..300, px in 1.0f64..20.0) {
        let r = random_raster(seed, w, h, px);
        let ims = tile_imagelets(&r, "c", &r.bounds());
        prop_assert_eq!(ims.len(), (w / TILE) * (h / TILE));
        let cells: BTreeSet<(usize, usize)> = ims.iter().map(|i| (i.id.row, i.id.col)).collect();
        prop_assert_eq!(cells.len(), ims.len());
        for (i, a) in ims.iter().enumerate() {
            prop_assert!((polygon_area(&a.bounds) - (TILE as f64 * px).powi(2)).abs() < 1e-6);
            for b in &ims[i + 1..] {
                prop_assert!(intersection_area(&a.bounds, &b.bounds) < 1e-6);
            }
            let (r0, c0) = (a.id.row * TILE, a.id.col * TILE);
            prop_assert_eq!(&a.pixels[..3], &r.pixel(r0, c0)[..]);
        }
        prop_assert_eq!(&tile_imagelets(&r, "c", &r.bounds()), &ims);
    }

    #[test]
    fn assignment_is_conservative_and_optimal(seed in any::<u64>(), n in 1usize..6) {
        let r = random_raster(seed, 256, 192, 10.0);
        let ims = tile_imagelets(&r, "c", &r.bounds());
        let mut g = rng(seed ^ 0x5eed);
        let bb = r.bounds().bbox();
        let districts: Vec<District> = (0..n)
            .map(|i| {
                let c = Point::new(g.random_range(bb.min_x..bb.max_x), g.random_range(bb.min_y..bb.max_y));
                let p = star_polygon(&mut g, 7, c, 200.0, 900.0);
                District::new(format!("d{i}"), "c", p)
            })
            .collect();
        let t = assign_imagelets(&ims, &districts);
        prop_assert_eq!(t.entries.len(), ims.len());
        let ids: BTreeSet<_> = t.entries.iter().map(|e| e.imagelet_id.clone()).collect();
        prop_assert_eq!(ids.len(), ims.len());
        let assigned = t.entries.iter().filter(|e| e.district_id.is_some()).count();
        prop_assert_eq!(t.counts.values().sum::<usize>(), assigned);
        for (e, im) in t.entries.iter().zip(&ims) {
            prop_assert_eq!(&e.imagelet_id, &im.id);
            let overlaps: Vec<f64> = districts.iter().map(|d| intersection_area(&im.bounds, &d.polygon)).collect();
            match &e.district_id {
                Some(id) => {
                    let own = overlaps[districts.iter().position(|d| &d.district_id == id).unwrap()];
                    prop_assert!(overlaps.iter().all(|&o| own >= o - 1e-6));
                }
                None => prop_assert!(overlaps.iter().all(|&o| o <= 1e-9)),
            }
        }
    }

    #[test]
    fn geotiff_round_trips(seed in any::<u64>(), w in 64usize..100, h in 64usize..100) {
        let r = random_raster(seed, w, h, 10.0);
        prop_assert_eq!(decode_geotiff(&encode_geotiff(&r).unwrap()).unwrap(), r);
    }
}

#[test]
fn boundary_filter_keeps_only_touching_tiles() {
    let r = random_raster(1, 256, 256, 10.0);
    // Small boundary in the second tile column of the top row.
    let b = Polygon::rect(500_700.0, 5_029_500.0, 500_800.0, 5_029_600.0).unwrap();
    let ims = tile_imagelets(&r, "c", &b);
    assert_eq!(ims.len(), 1);
    assert_eq!((ims[0].id.row, ims[0].id.col), (0, 1));
}

#[test]
fn adjacent_tiles_share_edges_exactly() {
    // A pixel size whose multiples round differently depending on grouping.
    let r = random_raster(0, 64, 256, 19.838079095160747);
    let ims = tile_imagelets(&r, "c", &r.bounds());
    for w in ims.windows(2) {
        assert_eq!(w[0].bounds.bbox().min_y, w[1].bounds.bbox().max_y);
        assert!(intersection_area(&w[0].bounds, &w[1].bounds) < 1e-6);
    }
}
