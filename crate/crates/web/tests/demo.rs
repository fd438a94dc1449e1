use cafbifpn_web::{fuse_map, fusion_coefficients, impulse_map, routing_view, support_radius, FUSE_SIZE, IMPULSE_SIZE};

#[test]
fn impulse_radius_follows_branch_geometry() {
    for dilation in 1..=3 {
        // 1x3, 3x1, dilated 3x3
        assert_eq!(support_radius(&impulse_map(dilation, 0, 0).unwrap()), 1 + dilation);
        // 1x5, 5x1, dilated 3x3
        assert_eq!(support_radius(&impulse_map(dilation, 0, 1).unwrap()), 2 + dilation);
        // 3x1, 1x3, deformable 3x3 with zero offsets
        assert_eq!(support_radius(&impulse_map(dilation, 0, 2).unwrap()), 2);
        assert_eq!(support_radius(&impulse_map(dilation, 0, -1).unwrap()), 2 + dilation);
    }
    assert_eq!(impulse_map(2, 0, -1).unwrap().len(), IMPULSE_SIZE * IMPULSE_SIZE);
}

#[test]
fn routing_view_is_consistent() {
    let v = routing_view(16, 4, 3, 5).unwrap();
    assert_eq!(v.affinity.len(), 256);
    assert_eq!(v.selected.len(), 16);
    for row in &v.selected {
        assert_eq!(row.len(), 3);
        assert!(row.iter().all(|&r| r < 16));
    }
    assert_eq!(v.qk_macs * 16, v.dense_qk_macs * 3);
    assert!(routing_view(15, 4, 3, 5).is_err());
}

#[test]
fn fusion_preview_is_a_convex_blend() {
    let c = fusion_coefficients(&[1.0, -2.0, 3.0], 0.0);
    assert_eq!(c, vec![0.25, 0.0, 0.75]);
    let map = fuse_map(&[1.0, 0.0, 0.0], 0.0).unwrap();
    assert_eq!(map.len(), FUSE_SIZE * FUSE_SIZE);
    assert!(map.iter().all(|v| *v == 0.0 || *v == 1.0));
    let blend = fuse_map(&[0.7, 1.3, 2.0], 1e-4).unwrap();
    assert!(blend.iter().all(|v| (0.0..=1.0).contains(v)));
}
