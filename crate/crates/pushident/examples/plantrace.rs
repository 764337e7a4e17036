use nalgebra::Vector2;
use pushident::dynamics::*;
use pushident::identify::ModelEnsemble;
use pushident::object::*;
use pushident::plan::*;

fn main() {
    let obj = decompose_footprint(&Footprint::Bitmap(vec!["#######".into(); 4]), 0.02).unwrap();
    let hidden = ParamMap::uniform(obj.n(), 0.03, 0.4);
    let ensemble = ModelEnsemble::single(hidden.clone());
    let state = BodyState::at_rest(Vector2::new(0.015, -0.207), -1.08);
    let target = Waypoint { position: Vector2::new(0.032, -0.241), rotation: -1.08 };
    let target_cells = expand_state(&obj, &target.to_body());
    let wcfg = WorldConfig::default();
    let brk = breakaway_force(&hidden);
    println!("brk {brk:.3}; to_target: {:?}", target.position - state.position);
    // replicate select_push internals
    let com = state.position; // uniform
    let axis = -(target.position - com).normalize();
    let cells = obj.world_cells(&state);
    let mut ranked: Vec<(f64, usize)> = obj.contour().iter().map(|cc| {
        let rel = cells[cc.cell] - com;
        (rel.normalize().dot(&axis), cc.cell)
    }).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    println!("ranked (top 16 of {}):", ranked.len());
    let hint = (target.position - com).normalize();
    for &(score, cell) in ranked.iter().take(16) {
        let cc = obj.contour().iter().find(|c| c.cell == cell).unwrap();
        let normal = cc.normals.iter().copied().max_by(|a, b| {
            rotate(state.rotation, -*a).dot(&hint).total_cmp(&rotate(state.rotation, -*b).dot(&hint))
        }).unwrap();
        let dir = rotate(state.rotation, -normal);
        print!("  cell{cell}{:?} align {score:+.2} dir({:+.2},{:+.2}):", obj.cells()[cell], dir.x, dir.y);
        for frac in [1.02, 1.05, 1.15, 1.35, 1.7] {
            let action = PushAction { contact_cell: cell, force: dir * (frac * brk), duration: 0.25 };
            let pred = execute_push(&obj, &state, &action, &hidden, &wcfg).unwrap();
            let gap = add_loss(&expand_state(&obj, &pred), &target_cells).unwrap();
            print!(" {gap:.3}");
        }
        println!();
    }
}
