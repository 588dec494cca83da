use std::ffi::{c_char, CStr, CString};
use std::ptr;

use ompsynth_ffi::*;

const DOT_PRODUCT: &str = include_str!("../../core/tests/fixtures/tsan/dot_product_two_types.txt");

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    omps_string_free(p);
    s
}

unsafe fn last_error() -> String {
    CStr::from_ptr(omps_last_error_message()).to_string_lossy().into_owned()
}

#[test]
fn tsan_parse_render_round_trip() {
    unsafe {
        let mut report = ptr::null_mut();
        let raw = cstr(DOT_PRODUCT);
        let file = cstr("generated.cc");
        assert_eq!(
            omps_parse_tsan(raw.as_ptr(), file.as_ptr(), &mut report),
            OmpsStatus::Ok
        );
        assert_eq!(omps_race_report_len(report), 2);

        let mut text = ptr::null_mut();
        assert_eq!(omps_race_report_render(report, &mut text), OmpsStatus::Ok);
        let text = take(text);
        assert!(text.contains("generated.cc:14"), "{text}");

        let mut again = ptr::null_mut();
        let t = cstr(&text);
        assert_eq!(omps_race_report_parse_answer(t.as_ptr(), &mut again), OmpsStatus::Ok);
        let (mut j1, mut j2) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(omps_race_report_to_json(report, &mut j1), OmpsStatus::Ok);
        assert_eq!(omps_race_report_to_json(again, &mut j2), OmpsStatus::Ok);
        assert_eq!(take(j1), take(j2));
        omps_race_report_free(report);
        omps_race_report_free(again);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut report = ptr::null_mut();
        let bad = cstr("not an answer at all");
        assert_eq!(
            omps_race_report_parse_answer(bad.as_ptr(), &mut report),
            OmpsStatus::Format
        );
        assert!(report.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            omps_race_report_parse_answer(ptr::null(), &mut report),
            OmpsStatus::NullArgument
        );
        assert!(last_error().contains("text"));
        let ok = cstr("[]");
        assert_eq!(
            omps_race_report_parse_answer(ok.as_ptr(), ptr::null_mut()),
            OmpsStatus::NullArgument
        );

        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(
            omps_race_report_parse_answer(invalid.as_ptr() as *const c_char, &mut report),
            OmpsStatus::InvalidUtf8
        );
        assert_eq!(omps_race_report_len(ptr::null()), 0);
        omps_race_report_free(ptr::null_mut());
        omps_string_free(ptr::null_mut());
    }
}

#[test]
fn instrument_strip_and_nesting() {
    let code = "int main() {\n  int s = 0;\n  #pragma omp parallel\n  {\n    #pragma omp for\n    for (int i = 0; i < 4; i++) s++;\n  }\n  return s;\n}\n";
    let spans = [
        OmpsSpan {
            start_line: 3,
            end_line: 7,
        },
        OmpsSpan {
            start_line: 5,
            end_line: 6,
        },
    ];
    unsafe {
        let c = cstr(code);
        let mut out = ptr::null_mut();
        assert_eq!(
            omps_instrument(c.as_ptr(), spans.as_ptr(), spans.len(), &mut out),
            OmpsStatus::Ok
        );
        let instrumented = take(out);
        let outer = instrumented.find("CALI_MARK_BEGIN(\"region_3_7\")").unwrap();
        let inner = instrumented.find("CALI_MARK_BEGIN(\"region_5_6\")").unwrap();
        assert!(outer < inner);

        let ic = cstr(&instrumented);
        assert_eq!(omps_check_marker_nesting(ic.as_ptr()), OmpsStatus::Ok);
        let mut stripped = ptr::null_mut();
        assert_eq!(omps_strip_markers(ic.as_ptr(), &mut stripped), OmpsStatus::Ok);
        assert_eq!(take(stripped), code);

        let overlapping = [
            OmpsSpan {
                start_line: 3,
                end_line: 6,
            },
            OmpsSpan {
                start_line: 5,
                end_line: 7,
            },
        ];
        assert_eq!(
            omps_instrument(c.as_ptr(), overlapping.as_ptr(), 2, &mut out),
            OmpsStatus::Format
        );
        assert_eq!(
            omps_instrument(c.as_ptr(), ptr::null(), 1, &mut out),
            OmpsStatus::NullArgument
        );
        assert_eq!(omps_instrument(c.as_ptr(), ptr::null(), 0, &mut out), OmpsStatus::Ok);
        assert!(take(out).contains("caliper"));
    }
}

#[test]
fn caliper_answer_round_trip() {
    let code = "void f() {\n  #pragma omp parallel for\n  for (int i = 0; i < 8; i++) work(i);\n}\n";
    let answer = "For code snippet (region_2_3):\n  #pragma omp parallel for\n  for (int i = 0; i < 8; i++) work(i);\n\nCaliper measures:\n- For 4 threads, a work percentage of 96\n- For 128 threads, a work percentage of 47\n";
    unsafe {
        let a = cstr(answer);
        let mut p = ptr::null_mut();
        let st = omps_caliper_profile_parse_answer(a.as_ptr(), &mut p);
        assert_eq!(st, OmpsStatus::Ok, "{}", last_error());
        let region = cstr("region_2_3");
        let mut w = 0.0;
        assert!(omps_caliper_profile_work(p, region.as_ptr(), 4, &mut w));
        assert_eq!(w, 96.0);
        assert!(omps_caliper_profile_work(p, region.as_ptr(), 128, &mut w));
        assert_eq!(w, 47.0);
        assert!(!omps_caliper_profile_work(p, region.as_ptr(), 16, &mut w));

        let c = cstr(code);
        let span = OmpsSpan {
            start_line: 2,
            end_line: 3,
        };
        let mut out = ptr::null_mut();
        assert_eq!(
            omps_caliper_profile_render(p, c.as_ptr(), &span, 1, &mut out),
            OmpsStatus::Ok
        );
        let rendered = take(out);
        let r = cstr(&rendered);
        let mut q = ptr::null_mut();
        assert_eq!(omps_caliper_profile_parse_answer(r.as_ptr(), &mut q), OmpsStatus::Ok);
        assert!(omps_caliper_profile_work(q, region.as_ptr(), 128, &mut w));
        assert_eq!(w, 47.0);
        omps_caliper_profile_free(p);
        omps_caliper_profile_free(q);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(omps_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
