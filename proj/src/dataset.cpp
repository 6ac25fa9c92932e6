#include "vssa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace vssa {

namespace {

struct Color {
    std::uint8_t r, g, b;
};

// Glyph colors are reserved: the clutter palette stays away from them so an
// object is never camouflaged into the background.
constexpr Color kGlyphColor[3] = {{210, 40, 40}, {245, 205, 60}, {50, 90, 210}};
constexpr Color kPole{105, 105, 115};
constexpr Color kBar{70, 70, 78};
constexpr Color kClutter[6] = {{130, 140, 120}, {150, 130, 110}, {120, 125, 135},
                               {145, 150, 140}, {110, 120, 105}, {140, 135, 150}};

void fill_rect(Image8& im, int x0, int y0, int x1, int y1, Color c) {
    x0 = std::max(0, x0);
    y0 = std::max(0, y0);
    x1 = std::min(im.w, x1);
    y1 = std::min(im.h, y1);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            im.at(x, y, 0) = c.r;
            im.at(x, y, 1) = c.g;
            im.at(x, y, 2) = c.b;
        }
}

struct Reserve {
    int x0, y0, x1, y1;  // full extent including pole/mount space, padded
};

bool overlaps(const Reserve& a, const Reserve& b) {
    return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

// The gantry bar's centre sits this fraction of the image side above the
// glyph centre. High enough that the bar occupies its own patch of sky two
// to three stride-32 cells up — never the glyph's cell or its immediate
// neighbour — while staying within reach of a four-cell column above.
constexpr double kBarOffsetFrac = 0.57;
int bar_height(int side) { return std::max(4, static_cast<int>(std::lround(side * 0.28))); }
int bar_width(int side) { return static_cast<int>(std::lround(side * 1.2)); }

}  // namespace

void draw_glyph(Image8& im, int cls, int x0, int y0, int side) {
    if (cls < 1 || cls > 3) throw std::invalid_argument("draw_glyph: class must be 1..3");
    const Color c = kGlyphColor[cls - 1];
    if (cls == 3) {  // rectangle: the box itself
        fill_rect(im, x0, y0, x0 + side, y0 + side, c);
        return;
    }
    if (cls == 1) {  // circle inscribed in the box
        const double cx = x0 + side / 2.0, cy = y0 + side / 2.0, r = side / 2.0;
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                if (dx * dx + dy * dy <= r * r) {
                    im.at(x, y, 0) = c.r;
                    im.at(x, y, 1) = c.g;
                    im.at(x, y, 2) = c.b;
                }
            }
        return;
    }
    // Triangle: apex on the top edge, base across the bottom edge.
    const double cx = x0 + side / 2.0;
    for (int j = 0; j < side; ++j) {
        const double hw = (j + 1) / 2.0;  // half-width at row j
        int lo = static_cast<int>(std::floor(cx - hw));
        int hi = static_cast<int>(std::ceil(cx + hw));
        lo = std::max(lo, x0);
        hi = std::min(hi, x0 + side);
        for (int x = lo; x < hi; ++x) {
            im.at(x, y0 + j, 0) = c.r;
            im.at(x, y0 + j, 1) = c.g;
            im.at(x, y0 + j, 2) = c.b;
        }
    }
}

Sample generate_scene(const SceneSpec& spec, std::uint64_t sample_index) {
    Rng master(spec.seed);
    Rng rng = master.fork(sample_index);

    if (spec.image_size < 16) throw std::invalid_argument("scene: image_size too small");
    if (spec.num_classes < 1 || spec.num_classes > 3) {
        throw std::invalid_argument("scene: num_classes must be 1..3 (fixed glyph archetypes)");
    }
    if (spec.min_signs > spec.max_signs || spec.min_distractors > spec.max_distractors) {
        throw std::invalid_argument("scene: count ranges must satisfy min <= max");
    }

    const int S = spec.image_size;
    Sample sample;
    sample.image = Image8::blank(S, S, 165, 170, 175);

    // Background: speckle noise, then muted blocks.
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const int n = rng.uniform_int(-8, 8);
            for (int ch = 0; ch < 3; ++ch) {
                const int v = sample.image.at(x, y, ch) + n;
                sample.image.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
            }
        }
    const int blocks = static_cast<int>(std::lround(spec.clutter * (S * S) / 256.0));
    for (int i = 0; i < blocks; ++i) {
        const int bw = rng.uniform_int(S / 16 + 1, S / 4 + 1);
        const int bh = rng.uniform_int(S / 16 + 1, S / 4 + 1);
        const int bx = rng.uniform_int(0, S - 1);
        const int by = rng.uniform_int(0, S - 1);
        fill_rect(sample.image, bx, by, bx + bw, by + bh, kClutter[rng.uniform_int(0, 5)]);
    }

    const int num_signs = rng.uniform_int(spec.min_signs, spec.max_signs);
    const int num_distractors = rng.uniform_int(spec.min_distractors, spec.max_distractors);

    std::vector<Reserve> reserves;
    const int lo_side = std::max(4, static_cast<int>(std::lround(spec.min_sign_frac * S)));
    const int hi_side = std::max(lo_side, static_cast<int>(std::lround(spec.max_sign_frac * S)));

    // Signs first, then distractors; each object gets a bounded number of
    // placement attempts before it is dropped.
    for (int obj = 0; obj < num_signs + num_distractors; ++obj) {
        const bool is_sign = obj < num_signs;
        const int side = rng.uniform_int(lo_side, hi_side);
        const int cls = rng.uniform_int(1, spec.num_classes);
        // Pole geometry is drawn regardless of presence so that pole_rate
        // does not shift the random stream (keeps cross-rate renders
        // pixel-comparable).
        const int pole_len = static_cast<int>(std::lround(side * rng.uniform(0.9, 1.3)));
        const int pole_w = std::max(2, side / 6);
        const bool pole_roll = rng.bernoulli(spec.pole_rate);  // drawn for every object
        const bool pole = (is_sign || spec.distractor_pole) && pole_roll;
        const bool bar = is_sign && spec.sign_bar;

        const int bar_off = static_cast<int>(std::lround(spec.image_size * kBarOffsetFrac));
        // Centre-to-centre offset converted to clearance above the glyph top.
        const int top_reserve = bar ? std::max(0, bar_off - side / 2 + bar_height(side) / 2 + 1) : 0;
        const int bottom_reserve = pole_len;
        const int y_lo = 1 + top_reserve;
        const int y_hi = S - side - bottom_reserve - 1;
        const int x_hi = S - side - 1;
        if (y_hi < y_lo || x_hi < 1) {
            ++sample.placement_failures;
            continue;
        }

        bool placed = false;
        // Tall reserves (pole below, mount above) make collisions common in
        // crowded scenes; a generous attempt budget keeps the requested object
        // counts realizable before we give up on one.
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const int x0 = rng.uniform_int(1, x_hi);
            const int y0 = rng.uniform_int(y_lo, y_hi);
            Reserve r{x0 - 2, y0 - top_reserve - 2, x0 + side + 2, y0 + side + bottom_reserve + 2};
            bool free = true;
            for (const auto& other : reserves) free = free && !overlaps(r, other);
            if (!free) continue;
            reserves.push_back(r);

            draw_glyph(sample.image, cls, x0, y0, side);
            if (pole) {
                const int px = x0 + (side - pole_w) / 2;
                fill_rect(sample.image, px, y0 + side, px + pole_w, y0 + side + pole_len, kPole);
            }
            if (mount) {
                const int mh = mount_height(side);
                const int mw = static_cast<int>(std::lround(side * 1.6));
                const int mx = x0 + side / 2 - mw / 2;
                fill_rect(sample.image, mx, y0 - kMountGap - mh, mx + mw, y0 - kMountGap, kMount);
            }
            SampleObject o;
            o.cls = cls;
            o.box = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x0 + side),
                     static_cast<double>(y0 + side)};
            o.pole = pole;
            (is_sign ? sample.objects : sample.distractors).push_back(o);
            placed = true;
        }
        if (!placed) ++sample.placement_failures;
    }
    return sample;
}

Sample generate_scene(const SceneSpec& spec) { return generate_scene(spec, 0); }

Image8 resize_nearest(const Image8& in, int out_w, int out_h) {
    if (in.w < 1 || in.h < 1 || out_w < 1 || out_h < 1) throw std::invalid_argument("resize: empty image");
    Image8 out;
    out.w = out_w;
    out.h = out_h;
    out.rgb.resize(static_cast<std::size_t>(out_w) * out_h * 3);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(in.h - 1, y * in.h / out_h);
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(in.w - 1, x * in.w / out_w);
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = in.at(sx, sy, c);
        }
    }
    return out;
}

void write_ppm(const std::filesystem::path& path, const Image8& im) {
    if (im.w < 1 || im.h < 1 || im.rgb.size() != static_cast<std::size_t>(im.w) * im.h * 3) {
        throw std::invalid_argument("write_ppm: image buffer inconsistent with its dimensions");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_ppm: cannot open " + path.string());
    os << "P6\n" << im.w << " " << im.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
    if (!os) throw FormatError("write_ppm: short write to " + path.string());
}

namespace {

// One header token: skips whitespace and '#' comments, then reads digits.
int ppm_int(std::istream& is, const std::string& path) {
    for (;;) {
        const int c = is.peek();
        if (c == EOF) throw FormatError("read_ppm: truncated header in " + path);
        if (std::isspace(c)) {
            is.get();
        } else if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            break;
        }
    }
    if (!std::isdigit(is.peek())) throw FormatError("read_ppm: malformed header token in " + path);
    int v = 0;
    is >> v;
    return v;
}

}  // namespace

Image8 read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_ppm: cannot open " + path.string());
    char magic[2] = {0, 0};
    is.read(magic, 2);
    if (is.gcount() != 2 || magic[0] != 'P' || magic[1] != '6') {
        if (magic[0] == 'P' && magic[1] == '3') {
            throw FormatError("read_ppm: " + path.string() + " is ASCII P3; only binary P6 is supported");
        }
        throw FormatError("read_ppm: " + path.string() + " is not a P6 pixmap");
    }
    Image8 im;
    im.w = ppm_int(is, path.string());
    im.h = ppm_int(is, path.string());
    const int maxval = ppm_int(is, path.string());
    if (im.w < 1 || im.h < 1) throw FormatError("read_ppm: non-positive dimensions in " + path.string());
    if (maxval != 255) {
        throw FormatError("read_ppm: maxval " + std::to_string(maxval) + " unsupported (need 255) in " +
                          path.string());
    }
    is.get();  // the single whitespace byte after maxval
    im.rgb.resize(static_cast<std::size_t>(im.w) * im.h * 3);
    is.read(reinterpret_cast<char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
    if (is.gcount() != static_cast<std::streamsize>(im.rgb.size())) {
        throw FormatError("read_ppm: pixel data truncated in " + path.string());
    }
    return im;
}

std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("annotations: cannot open " + path.string());
    std::vector<Annotation> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        Annotation a;
        if (!(ls >> a.image)) continue;  // blank line
        const std::string where = path.string() + " line " + std::to_string(lineno);
        if (!(ls >> a.cls >> a.xmin >> a.ymin >> a.xmax >> a.ymax)) {
            throw FormatError("annotations: " + where + ": expected <image> <class> <xmin> <ymin> <xmax> <ymax>");
        }
        std::string extra;
        if (ls >> extra) throw FormatError("annotations: " + where + ": trailing token '" + extra + "'");
        if (a.cls < 1) throw FormatError("annotations: " + where + ": class must be >= 1");
        if (!std::isfinite(a.xmin) || !std::isfinite(a.ymin) || !std::isfinite(a.xmax) || !std::isfinite(a.ymax)) {
            throw FormatError("annotations: " + where + ": non-finite coordinate");
        }
        if (a.xmax <= a.xmin) throw FormatError("annotations: " + where + ": xmax <= xmin");
        if (a.ymax <= a.ymin) throw FormatError("annotations: " + where + ": ymax <= ymin");
        out.push_back(std::move(a));
    }
    return out;
}

void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& list) {
    std::ofstream os(path);
    if (!os) throw FormatError("annotations: cannot open " + path.string() + " for writing");
    os.precision(17);  // round-trips doubles exactly
    for (const auto& a : list) {
        os << a.image << " " << a.cls << " " << a.xmin << " " << a.ymin << " " << a.xmax << " " << a.ymax << "\n";
    }
    if (!os) throw FormatError("annotations: short write to " + path.string());
}

GenerateReport generate_dataset(const std::filesystem::path& dir, const SceneSpec& spec, int train_count,
                                int test_count) {
    if (train_count < 0 || test_count < 0) throw std::invalid_argument("generate_dataset: negative counts");
    std::filesystem::create_directories(dir / "images");

    GenerateReport rep;
    auto emit_split = [&](const std::string& split, int count, std::uint64_t index_base) {
        std::vector<Annotation> annos;
        for (int i = 0; i < count; ++i) {
            auto sample = generate_scene(spec, index_base + static_cast<std::uint64_t>(i));
            char name[64];
            std::snprintf(name, sizeof(name), "images/%s_%05d.ppm", split.c_str(), i);
            write_ppm(dir / name, sample.image);
            for (const auto& o : sample.objects) {
                annos.push_back({name, o.cls, o.box.xmin, o.box.ymin, o.box.xmax, o.box.ymax});
            }
            rep.objects += static_cast<int>(sample.objects.size());
            rep.placement_failures += sample.placement_failures;
            ++rep.images;
        }
        write_annotations(dir / (split + ".txt"), annos);
    };
    emit_split("train", train_count, 0);
    emit_split("test", test_count, static_cast<std::uint64_t>(train_count));

    std::ofstream manifest(dir / "manifest.txt");
    manifest << "image_size = " << spec.image_size << "\n"
             << "classes = " << spec.num_classes << "\n"
             << "signs = " << spec.min_signs << ".." << spec.max_signs << "\n"
             << "distractors = " << spec.min_distractors << ".." << spec.max_distractors << "\n"
             << "pole_rate = " << spec.pole_rate << "\n"
             << "clutter = " << spec.clutter << "\n"
             << "sign_frac = " << spec.min_sign_frac << ".." << spec.max_sign_frac << "\n"
             << "distractor_mount = " << (spec.distractor_mount ? 1 : 0) << "\n"
             << "distractor_pole = " << (spec.distractor_pole ? 1 : 0) << "\n"
             << "seed = " << spec.seed << "\n"
             << "train = " << train_count << "\n"
             << "test = " << test_count << "\n";
    return rep;
}

std::vector<DatasetEntry> load_split(const std::filesystem::path& dir, const std::string& split) {
    auto annos = read_annotations(dir / (split + ".txt"));
    std::vector<DatasetEntry> entries;
    std::map<std::string, std::size_t> index;
    for (const auto& a : annos) {
        auto it = index.find(a.image);
        if (it == index.end()) {
            index.emplace(a.image, entries.size());
            entries.push_back({a.image, {}});
            it = index.find(a.image);
        }
        entries[it->second].gts.push_back({a.xmin, a.ymin, a.xmax, a.ymax, a.cls});
    }
    return entries;
}

}  // namespace vssa
