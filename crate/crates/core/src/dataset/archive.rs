//! Reader for the published HDF5 matching archive.
//!
//! One file holds one split. Patches are either a single `(N, 2, H, W)` or
//! `(N, H, W, 2)` array or two `(N, H, W)` arrays; labels are an `(N,)` or
//! `(N, 1)` vector. Integer pixel data is divided by 255; float data is kept
//! when it already lies in [0,1] and divided by 255 otherwise.

use std::path::Path;

use super::{LabelOrientation, PairDataset, Patch, PatchPair};
use crate::error::{Error, Result};

/// Dataset names probed inside an archive file, first match wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveLayout {
    pub stacked_patches: Vec<String>,
    pub separate_patches: Vec<(String, String)>,
    pub labels: Vec<String>,
}

impl Default for ArchiveLayout {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            stacked_patches: s(&["X", "x", "patches", "data"]),
            separate_patches: vec![("X1".into(), "X2".into()), ("a".into(), "b".into())],
            labels: s(&["Y", "y", "labels", "label"]),
        }
    }
}

/// Raw array pulled out of the container.
struct Array {
    dims: Vec<usize>,
    values: Vec<f32>,
    integer: bool,
}

fn normalize(values: &mut [f32], integer: bool) -> Result<()> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Format("archive pixel values must be finite and nonnegative".into()));
    }
    if integer || max > 1.0 {
        if max > 255.0 {
            return Err(Error::Format(format!("pixel value {max} exceeds 8-bit range")));
        }
        values.iter_mut().for_each(|v| *v /= 255.0);
    }
    Ok(())
}

fn assemble(path: &Path, a: Vec<Vec<f32>>, b: Vec<Vec<f32>>, h: usize, w: usize, labels: Array) -> Result<PairDataset> {
    let n = a.len();
    let label_count = labels.dims.iter().product::<usize>();
    if label_count != n {
        return Err(Error::Format(format!("{n} patch pairs but {label_count} labels")));
    }
    let mut pairs = Vec::with_capacity(n);
    for (index, ((pa, pb), y)) in a.into_iter().zip(b).zip(labels.values).enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Format(format!("label {y} outside {{0,1}} at pair {index}")));
        }
        pairs.push(PatchPair::new(Patch::new(h, w, pa)?, Patch::new(h, w, pb)?, y as u8, index)?);
    }
    let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("archive");
    PairDataset::new(pairs, split, LabelOrientation::MatchIsOne)
}

fn split_stacked(x: Array) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, usize, usize)> {
    let (n, channels_first, h, w) = match x.dims.as_slice() {
        &[n, 2, h, w] => (n, true, h, w),
        &[n, h, w, 2] => (n, false, h, w),
        other => return Err(Error::Format(format!("stacked patch array has shape {other:?}, expected (N,2,H,W) or (N,H,W,2)"))),
    };
    let hw = h * w;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for s in x.values.chunks_exact(2 * hw) {
        if channels_first {
            a.push(s[..hw].to_vec());
            b.push(s[hw..].to_vec());
        } else {
            a.push(s.iter().step_by(2).copied().collect());
            b.push(s.iter().skip(1).step_by(2).copied().collect());
        }
    }
    Ok((a, b, h, w))
}

fn split_single(x: Array) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    match x.dims.as_slice() {
        &[_, h, w] | &[_, h, w, 1] | &[_, 1, h, w] => Ok((x.values.chunks_exact(h * w).map(<[f32]>::to_vec).collect(), h, w)),
        other => Err(Error::Format(format!("patch array has shape {other:?}, expected (N,H,W)"))),
    }
}

pub(super) fn read_archive(path: &Path, layout: &ArchiveLayout) -> Result<PairDataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let file = ffi::H5File::open(path)?;
    let labels_name = layout
        .labels
        .iter()
        .find(|n| file.has(n))
        .ok_or_else(|| Error::Format(format!("{}: no label dataset among {:?}", path.display(), layout.labels)))?;
    let labels = file.read(labels_name)?;

    if let Some(name) = layout.stacked_patches.iter().find(|n| file.has(n)) {
        let mut x = file.read(name)?;
        normalize(&mut x.values, x.integer)?;
        let (a, b, h, w) = split_stacked(x)?;
        return assemble(path, a, b, h, w, labels);
    }
    if let Some((na, nb)) = layout.separate_patches.iter().find(|(a, b)| file.has(a) && file.has(b)) {
        let mut xa = file.read(na)?;
        let mut xb = file.read(nb)?;
        normalize(&mut xa.values, xa.integer)?;
        normalize(&mut xb.values, xb.integer)?;
        let (a, h, w) = split_single(xa)?;
        let (b, hb, wb) = split_single(xb)?;
        if (h, w) != (hb, wb) || a.len() != b.len() {
            return Err(Error::Format("patch arrays a and b disagree in shape".into()));
        }
        return assemble(path, a, b, h, w, labels);
    }
    Err(Error::Format(format!("{}: no patch dataset found", path.display())))
}

/// Writes `d` in the stacked `(N, 2, H, W)` u8 layout with an `(N,)` u8
/// label vector named `X` / `Y`. Pixels are quantized to 8 bits.
pub fn write_archive(d: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = d.patch_dims().unwrap_or((0, 0));
    let mut x = Vec::with_capacity(d.len() * 2 * h * w);
    for p in d.pairs() {
        for patch in [&p.a, &p.b] {
            x.extend(patch.pixels().iter().map(|v| (v * 255.0).round() as u8));
        }
    }
    let y: Vec<u8> = d.canonical_labels();
    let file = ffi::H5File::create(path.as_ref())?;
    file.write_u8("X", &[d.len(), 2, h, w], &x)?;
    file.write_u8("Y", &[d.len()], &y)?;
    Ok(())
}

#[cfg(feature = "hdf5")]
mod ffi {
    //! Minimal bindings to the HDF5 C library. The serial library is not
    //! thread-safe, so every call happens under `LOCK`.

    use std::ffi::CString;
    use std::os::raw::{c_char, c_int, c_uint, c_void};
    use std::path::Path;
    use std::sync::Mutex;

    use super::Array;
    use crate::error::{Error, Result};

    type Hid = i64;
    type Herr = c_int;
    type Hsize = u64;

    const H5P_DEFAULT: Hid = 0;
    const H5S_ALL: Hid = 0;
    const H5E_DEFAULT: Hid = 0;
    const H5F_ACC_RDONLY: c_uint = 0;
    const H5F_ACC_TRUNC: c_uint = 2;
    const H5T_INTEGER: c_int = 0;
    const H5T_FLOAT: c_int = 1;

    #[link(name = "hdf5")]
    extern "C" {
        fn H5open() -> Herr;
        fn H5Eset_auto2(estack: Hid, func: *const c_void, data: *mut c_void) -> Herr;
        fn H5Eclear2(estack: Hid) -> Herr;
        fn H5Fopen(name: *const c_char, flags: c_uint, fapl: Hid) -> Hid;
        fn H5Fcreate(name: *const c_char, flags: c_uint, fcpl: Hid, fapl: Hid) -> Hid;
        fn H5Fclose(file: Hid) -> Herr;
        fn H5Lexists(loc: Hid, name: *const c_char, lapl: Hid) -> c_int;
        fn H5Dopen2(loc: Hid, name: *const c_char, dapl: Hid) -> Hid;
        fn H5Dcreate2(loc: Hid, name: *const c_char, dtype: Hid, space: Hid, lcpl: Hid, dcpl: Hid, dapl: Hid) -> Hid;
        fn H5Dget_space(dset: Hid) -> Hid;
        fn H5Dget_type(dset: Hid) -> Hid;
        fn H5Dread(dset: Hid, mem_type: Hid, mem_space: Hid, file_space: Hid, plist: Hid, buf: *mut c_void) -> Herr;
        fn H5Dwrite(dset: Hid, mem_type: Hid, mem_space: Hid, file_space: Hid, plist: Hid, buf: *const c_void) -> Herr;
        fn H5Dclose(dset: Hid) -> Herr;
        fn H5Screate_simple(rank: c_int, dims: *const Hsize, maxdims: *const Hsize) -> Hid;
        fn H5Sget_simple_extent_ndims(space: Hid) -> c_int;
        fn H5Sget_simple_extent_dims(space: Hid, dims: *mut Hsize, maxdims: *mut Hsize) -> c_int;
        fn H5Sclose(space: Hid) -> Herr;
        fn H5Tget_class(dtype: Hid) -> c_int;
        fn H5Tclose(dtype: Hid) -> Herr;
        static H5T_NATIVE_FLOAT_g: Hid;
        static H5T_NATIVE_UCHAR_g: Hid;
    }

    static LOCK: Mutex<()> = Mutex::new(());

    fn lock() -> std::sync::MutexGuard<'static, ()> {
        LOCK.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn init() {
        // SAFETY: H5open is idempotent; the auto error printer is process-global state
        // and turning it off only silences stderr output.
        unsafe {
            H5open();
            H5Eset_auto2(0, std::ptr::null(), std::ptr::null_mut());
        }
    }

    fn clear_errors() {
        // SAFETY: clears the default error stack; valid at any time after H5open.
        unsafe {
            H5Eclear2(H5E_DEFAULT);
        }
    }

    fn cstr(s: &str) -> Result<CString> {
        CString::new(s).map_err(|_| Error::Format(format!("name {s:?} contains NUL")))
    }

    fn path_cstr(path: &Path) -> Result<CString> {
        cstr(path.to_str().ok_or_else(|| Error::Format(format!("non-UTF-8 path {}", path.display())))?)
    }

    pub struct H5File {
        id: Hid,
        path: String,
    }

    impl H5File {
        pub fn open(path: &Path) -> Result<Self> {
            let name = path_cstr(path)?;
            let _g = lock();
            init();
            // SAFETY: name is a valid NUL-terminated string for the duration of the call.
            let id = unsafe { H5Fopen(name.as_ptr(), H5F_ACC_RDONLY, H5P_DEFAULT) };
            if id < 0 {
                clear_errors();
                return Err(Error::Format(format!("{}: not a readable HDF5 file", path.display())));
            }
            Ok(Self { id, path: path.display().to_string() })
        }

        pub fn create(path: &Path) -> Result<Self> {
            let name = path_cstr(path)?;
            let _g = lock();
            init();
            // SAFETY: as above.
            let id = unsafe { H5Fcreate(name.as_ptr(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT) };
            if id < 0 {
                clear_errors();
                return Err(Error::Format(format!("{}: cannot create HDF5 file", path.display())));
            }
            Ok(Self { id, path: path.display().to_string() })
        }

        pub fn has(&self, name: &str) -> bool {
            let Ok(c) = cstr(name) else { return false };
            let _g = lock();
            // SAFETY: self.id is an open file handle.
            unsafe { H5Lexists(self.id, c.as_ptr(), H5P_DEFAULT) > 0 }
        }

        pub fn read(&self, name: &str) -> Result<Array> {
            let c = cstr(name)?;
            let fail = |what: &str| Error::Format(format!("{}: {what} for dataset {name}", self.path));
            let _g = lock();
            // SAFETY: handles are checked before use and closed on every path; the read
            // buffer is sized from the dataspace extent.
            unsafe {
                let dset = H5Dopen2(self.id, c.as_ptr(), H5P_DEFAULT);
                if dset < 0 {
                    return Err(fail("cannot open"));
                }
                let space = H5Dget_space(dset);
                let rank = H5Sget_simple_extent_ndims(space);
                let mut dims = vec![0 as Hsize; rank.max(0) as usize];
                H5Sget_simple_extent_dims(space, dims.as_mut_ptr(), std::ptr::null_mut());
                H5Sclose(space);
                let dtype = H5Dget_type(dset);
                let class = H5Tget_class(dtype);
                H5Tclose(dtype);
                if class != H5T_INTEGER && class != H5T_FLOAT {
                    H5Dclose(dset);
                    return Err(fail("unsupported element type"));
                }
                let dims: Vec<usize> = dims.into_iter().map(|d| d as usize).collect();
                let mut values = vec![0f32; dims.iter().product()];
                let status = H5Dread(dset, H5T_NATIVE_FLOAT_g, H5S_ALL, H5S_ALL, H5P_DEFAULT, values.as_mut_ptr().cast());
                H5Dclose(dset);
                if status < 0 {
                    return Err(fail("read failed"));
                }
                Ok(Array { dims, values, integer: class == H5T_INTEGER })
            }
        }

        pub fn write_u8(&self, name: &str, dims: &[usize], data: &[u8]) -> Result<()> {
            let c = cstr(name)?;
            assert_eq!(dims.iter().product::<usize>(), data.len());
            let dims: Vec<Hsize> = dims.iter().map(|&d| d as Hsize).collect();
            let _g = lock();
            // SAFETY: dims and data outlive the calls; data length matches the dataspace.
            unsafe {
                let space = H5Screate_simple(dims.len() as c_int, dims.as_ptr(), std::ptr::null());
                let dset = H5Dcreate2(self.id, c.as_ptr(), H5T_NATIVE_UCHAR_g, space, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
                let status = if dset >= 0 {
                    H5Dwrite(dset, H5T_NATIVE_UCHAR_g, H5S_ALL, H5S_ALL, H5P_DEFAULT, data.as_ptr().cast())
                } else {
                    -1
                };
                if dset >= 0 {
                    H5Dclose(dset);
                }
                H5Sclose(space);
                if status < 0 {
                    return Err(Error::Format(format!("{}: cannot write dataset {name}", self.path)));
                }
            }
            Ok(())
        }
    }

    impl Drop for H5File {
        fn drop(&mut self) {
            let _g = lock();
            // SAFETY: id came from H5Fopen/H5Fcreate and is closed exactly once.
            unsafe {
                H5Fclose(self.id);
            }
        }
    }
}

#[cfg(not(feature = "hdf5"))]
mod ffi {
    use std::path::Path;

    use super::Array;
    use crate::error::{Error, Result};

    pub struct H5File;

    fn unsupported() -> Error {
        Error::Format("built without HDF5 support (enable the `hdf5` feature)".into())
    }

    impl H5File {
        pub fn open(_: &Path) -> Result<Self> {
            Err(unsupported())
        }
        pub fn create(_: &Path) -> Result<Self> {
            Err(unsupported())
        }
        pub fn has(&self, _: &str) -> bool {
            false
        }
        pub fn read(&self, _: &str) -> Result<Array> {
            Err(unsupported())
        }
        pub fn write_u8(&self, _: &str, _: &[usize], _: &[u8]) -> Result<()> {
            Err(unsupported())
        }
    }
}

#[cfg(all(test, feature = "hdf5"))]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, toy_dataset, DatasetFormat};

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matching-test.h5");
        let d = toy_dataset(5, 2, 3);
        write_archive(&d, &path).unwrap();
        let back = load_dataset(&path, DatasetFormat::PublishedArchive).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.canonical_labels(), d.canonical_labels());
        for (x, y) in back.pairs().iter().zip(d.pairs()) {
            for (u, v) in x.a.pixels().iter().zip(y.a.pixels()) {
                assert!((u - v).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn channels_last_and_separate_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.h5");
        {
            let f = ffi::H5File::create(&path).unwrap();
            // two pairs of 1x2 patches, channels last: (N, H, W, 2)
            f.write_u8("X", &[2, 1, 2, 2], &[0, 255, 51, 102, 10, 20, 30, 40]).unwrap();
            f.write_u8("Y", &[2], &[1, 0]).unwrap();
        }
        let d = load_dataset(&path, DatasetFormat::PublishedArchive).unwrap();
        assert_eq!(d.pairs()[0].a.pixels(), &[0.0, 51.0 / 255.0]);
        assert_eq!(d.pairs()[0].b.pixels(), &[1.0, 102.0 / 255.0]);

        let path2 = dir.path().join("sep.h5");
        {
            let f = ffi::H5File::create(&path2).unwrap();
            f.write_u8("X1", &[1, 2, 1], &[0, 255]).unwrap();
            f.write_u8("X2", &[1, 2, 1], &[255, 0]).unwrap();
            f.write_u8("labels", &[1], &[1]).unwrap();
        }
        let d2 = load_dataset(&path2, DatasetFormat::PublishedArchive).unwrap();
        assert_eq!(d2.pairs()[0].b.pixels(), &[1.0, 0.0]);
    }

    #[test]
    fn archive_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.h5");
        {
            let f = ffi::H5File::create(&path).unwrap();
            f.write_u8("X", &[1, 2, 1, 1], &[0, 0]).unwrap();
            f.write_u8("Y", &[1], &[2]).unwrap();
        }
        assert!(matches!(load_dataset(&path, DatasetFormat::PublishedArchive), Err(Error::Format(_))));
        let junk = dir.path().join("junk.h5");
        std::fs::write(&junk, b"not hdf5").unwrap();
        assert!(matches!(load_dataset(&junk, DatasetFormat::PublishedArchive), Err(Error::Format(_))));
    }
}
