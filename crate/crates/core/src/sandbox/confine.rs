//! Filesystem write confinement for tool processes via Landlock.
//!
//! The ruleset is built in the parent; the child only issues two
//! async-signal-safe syscalls between fork and exec. Reads stay unrestricted;
//! every write-class access is denied outside the allowed paths.

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::path::Path;

#[cfg(target_os = "linux")]
mod sys {
    pub const CREATE_RULESET_VERSION: u32 = 1;
    pub const RULE_PATH_BENEATH: libc::c_int = 1;

    pub const WRITE_FILE: u64 = 1 << 1;
    pub const REMOVE_DIR: u64 = 1 << 4;
    pub const REMOVE_FILE: u64 = 1 << 5;
    pub const MAKE_CHAR: u64 = 1 << 6;
    pub const MAKE_DIR: u64 = 1 << 7;
    pub const MAKE_REG: u64 = 1 << 8;
    pub const MAKE_SOCK: u64 = 1 << 9;
    pub const MAKE_FIFO: u64 = 1 << 10;
    pub const MAKE_BLOCK: u64 = 1 << 11;
    pub const MAKE_SYM: u64 = 1 << 12;
    pub const REFER: u64 = 1 << 13;
    pub const TRUNCATE: u64 = 1 << 14;

    #[repr(C)]
    pub struct RulesetAttr {
        pub handled_access_fs: u64,
    }

    #[repr(C, packed)]
    pub struct PathBeneathAttr {
        pub allowed_access: u64,
        pub parent_fd: i32,
    }
}

/// Landlock ABI version of the running kernel, if Landlock is enabled.
#[cfg(target_os = "linux")]
pub fn abi_version() -> Option<i64> {
    let v = unsafe {
        libc::syscall(
            libc::SYS_landlock_create_ruleset,
            std::ptr::null::<sys::RulesetAttr>(),
            0usize,
            sys::CREATE_RULESET_VERSION,
        )
    };
    (v > 0).then_some(v)
}

#[cfg(not(target_os = "linux"))]
pub fn abi_version() -> Option<i64> {
    None
}

/// A prepared ruleset. Must outlive the spawn that applies it.
#[derive(Debug)]
pub struct Ruleset {
    fd: OwnedFd,
}

impl Ruleset {
    pub fn raw_fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }
}

#[cfg(target_os = "linux")]
fn open_path(path: &Path) -> io::Result<OwnedFd> {
    use std::os::unix::fs::OpenOptionsExt;
    let file = std::fs::OpenOptions::new().read(true).custom_flags(libc::O_PATH | libc::O_CLOEXEC).open(path)?;
    Ok(OwnedFd::from(file))
}

/// Builds a ruleset allowing writes beneath `dirs` and to the files in
/// `files` only.
#[cfg(target_os = "linux")]
pub fn writes_confined_to(dirs: &[&Path], files: &[&Path]) -> io::Result<Ruleset> {
    use sys::*;
    let abi = abi_version().ok_or_else(|| io::Error::new(io::ErrorKind::Unsupported, "Landlock is not available"))?;
    let mut handled = WRITE_FILE
        | REMOVE_DIR
        | REMOVE_FILE
        | MAKE_CHAR
        | MAKE_DIR
        | MAKE_REG
        | MAKE_SOCK
        | MAKE_FIFO
        | MAKE_BLOCK
        | MAKE_SYM;
    if abi >= 2 {
        handled |= REFER;
    }
    if abi >= 3 {
        handled |= TRUNCATE;
    }
    let attr = RulesetAttr { handled_access_fs: handled };
    let fd = unsafe {
        libc::syscall(libc::SYS_landlock_create_ruleset, &attr as *const RulesetAttr, std::mem::size_of::<RulesetAttr>(), 0u32)
    };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let ruleset = Ruleset { fd: unsafe { OwnedFd::from_raw_fd(fd as RawFd) } };
    let file_access = handled & (WRITE_FILE | TRUNCATE);
    let rules = dirs.iter().map(|d| (*d, handled)).chain(files.iter().map(|f| (*f, file_access)));
    for (path, access) in rules {
        let parent = open_path(path)?;
        let rule = PathBeneathAttr { allowed_access: access, parent_fd: parent.as_raw_fd() };
        let rc = unsafe {
            libc::syscall(libc::SYS_landlock_add_rule, ruleset.raw_fd(), RULE_PATH_BENEATH, &rule as *const PathBeneathAttr, 0u32)
        };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(ruleset)
}

#[cfg(not(target_os = "linux"))]
pub fn writes_confined_to(_dirs: &[&Path], _files: &[&Path]) -> io::Result<Ruleset> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "Landlock is not available"))
}

/// Applies the ruleset to the calling process. Async-signal-safe; intended
/// for use between fork and exec.
///
/// # Safety
/// `fd` must be a live Landlock ruleset descriptor.
#[cfg(target_os = "linux")]
pub unsafe fn restrict_self(fd: RawFd) -> io::Result<()> {
    if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
        return Err(io::Error::last_os_error());
    }
    if libc::syscall(libc::SYS_landlock_restrict_self, fd, 0u32) != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub unsafe fn restrict_self(_fd: RawFd) -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "Landlock is not available"))
}
