#pragma once

#include <filesystem>
#include <string>

#include "vssa/detection.hpp"
#include "vssa/rng.hpp"

namespace vssa {

// Row-major 8-bit RGB image (3 bytes per pixel).
struct Image8 {
    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb;

    static Image8 blank(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        Image8 im;
        im.w = w;
        im.h = h;
        im.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
        for (std::size_t i = 0; i < im.rgb.size(); i += 3) {
            im.rgb[i] = r;
            im.rgb[i + 1] = g;
            im.rgb[i + 2] = b;
        }
        return im;
    }

    std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
};

// Scene recipe. Classes are fixed glyph archetypes: 1 = circle, 2 = triangle,
// 3 = rectangle, each in its own color. True signs optionally stand on a pole
// and carry a gantry bar hung well above the glyph; distractors reuse the
// exact glyph renderer but never get the bar. The glyphs themselves are
// byte-identical, so whatever separates a sign from a distractor has to come
// from that surrounding structure, not from appearance.
struct SceneSpec {
    int image_size = 128;
    int min_signs = 1, max_signs = 1;
    int num_classes = 3;  // uses glyphs 1..num_classes (max 3)
    double pole_rate = 1.0;
    int min_distractors = 0, max_distractors = 0;
    double clutter = 0.05;  // background block density
    double min_sign_frac = 0.14, max_sign_frac = 0.20;  // glyph side / image side
    // Overhead gantry bar on true signs. Its centre sits a fixed, deliberately
    // large fraction of the image above the glyph, so only genuinely tall
    // context reaches it — nothing near the glyph itself gives the sign away.
    bool sign_bar = true;
    // When set, pole_rate applies to distractors too, making the pole below
    // uninformative; the overhead bar is then the only cue left.
    bool distractor_pole = false;
    std::uint64_t seed = 1;
};

struct SampleObject {
    int cls = 0;
    Box box;
    bool pole = false;
};

struct Sample {
    Image8 image;
    std::vector<SampleObject> objects;      // labeled true signs
    std::vector<SampleObject> distractors;  // rendered but never labeled
    int placement_failures = 0;             // objects dropped after retries
};

// Glyph renderer shared by signs and distractors; pixels stay inside
// [x0,x0+side) x [y0,y0+side) and touch all four edges of that box.
void draw_glyph(Image8& im, int cls, int x0, int y0, int side);

Sample generate_scene(const SceneSpec& spec);
// Per-sample determinism for datasets: sample k uses an independent stream
// forked from the spec seed, so generation order never matters.
Sample generate_scene(const SceneSpec& spec, std::uint64_t sample_index);

Image8 resize_nearest(const Image8& in, int out_w, int out_h);

// Binary portable pixmap (P6, maxval 255) — bit-exact round trips, zero
// dependencies. The ASCII P3 variant is rejected.
void write_ppm(const std::filesystem::path& path, const Image8& im);
Image8 read_ppm(const std::filesystem::path& path);

// One object per line: <image_path> <class_id> <xmin> <ymin> <xmax> <ymax>.
// '#' starts a comment, blank lines are skipped. Malformed lines raise
// FormatError naming the line number.
struct Annotation {
    std::string image;
    int cls = 0;
    double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
};

std::vector<Annotation> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& list);

// Directory layout: images/*.ppm plus train.txt/test.txt annotation lists.
struct DatasetEntry {
    std::string image_path;  // relative to the dataset root
    std::vector<GtBox> gts;
};

struct GenerateReport {
    int images = 0;
    int objects = 0;
    int placement_failures = 0;
};

GenerateReport generate_dataset(const std::filesystem::path& dir, const SceneSpec& spec, int train_count,
                                int test_count);
std::vector<DatasetEntry> load_split(const std::filesystem::path& dir, const std::string& split);

}  // namespace vssa
