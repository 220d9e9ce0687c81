pub(crate) mod binary;
mod export;
pub mod presets;

pub use export::{
    load_mesh, mesh_from_json, mesh_to_json, save_mesh, vtk_string, write_vtk, CellField,
    PointField, Table,
};
pub use presets::{Circle, MeshSpec};
