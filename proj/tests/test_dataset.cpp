#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "vssa/dataset.hpp"

using namespace vssa;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& tag) : path(fs::temp_directory_path() / ("vssa_ds_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
};

bool same_pixels(const Image8& a, const Image8& b) { return a.w == b.w && a.h == b.h && a.rgb == b.rgb; }

int count_lines(const fs::path& p) {
    std::ifstream is(p);
    std::string line;
    int n = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("scene generation is deterministic per seed") {
    SceneSpec spec;
    spec.seed = 7;
    spec.min_distractors = spec.max_distractors = 2;
    auto a = generate_scene(spec);
    auto b = generate_scene(spec);
    CHECK(same_pixels(a.image, b.image));
    REQUIRE(a.objects.size() == b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        CHECK(a.objects[i].cls == b.objects[i].cls);
        CHECK(a.objects[i].box.xmin == b.objects[i].box.xmin);
        CHECK(a.objects[i].box.ymax == b.objects[i].box.ymax);
    }
    spec.seed = 8;
    auto c = generate_scene(spec);
    CHECK(!same_pixels(a.image, c.image));
}

TEST_CASE("one sign and no distractors yields exactly one annotation") {
    SceneSpec spec;
    spec.seed = 11;
    auto s = generate_scene(spec);
    CHECK(s.objects.size() == 1);
    CHECK(s.distractors.empty());
    CHECK(s.placement_failures == 0);
    CHECK(s.objects[0].cls >= 1);
    CHECK(s.objects[0].cls <= 3);
}

TEST_CASE("pole pixels sit strictly below the sign box across 100 samples") {
    SceneSpec with_pole, without;
    with_pole.pole_rate = 1.0;
    without.pole_rate = 0.0;
    for (std::uint64_t k = 0; k < 100; ++k) {
        auto a = generate_scene(with_pole, k);
        auto b = generate_scene(without, k);
        REQUIRE(a.objects.size() == 1);
        REQUIRE(b.objects.size() == 1);
        CHECK(a.objects[0].pole);
        CHECK(!b.objects[0].pole);
        // The runs share every random draw, so the pole is exactly the pixel
        // difference between them.
        const auto& box = a.objects[0].box;
        bool any_diff = false;
        for (int y = 0; y < a.image.h; ++y)
            for (int x = 0; x < a.image.w; ++x)
                for (int c = 0; c < 3; ++c)
                    if (a.image.at(x, y, c) != b.image.at(x, y, c)) {
                        any_diff = true;
                        CHECK(y >= static_cast<int>(box.ymax));
                        CHECK(x >= static_cast<int>(box.xmin));
                        CHECK(x < static_cast<int>(box.xmax));
                    }
        CHECK(any_diff);
    }
}

TEST_CASE("glyphs touch all four edges of their labeled box") {
    for (int cls = 1; cls <= 3; ++cls) {
        for (int side : {7, 8, 12, 19, 26}) {
            auto im = Image8::blank(40, 40, 0, 0, 0);
            draw_glyph(im, cls, 6, 9, side);
            int xmin = 40, xmax = -1, ymin = 40, ymax = -1;
            for (int y = 0; y < 40; ++y)
                for (int x = 0; x < 40; ++x)
                    if (im.at(x, y, 0) || im.at(x, y, 1) || im.at(x, y, 2)) {
                        xmin = std::min(xmin, x);
                        xmax = std::max(xmax, x);
                        ymin = std::min(ymin, y);
                        ymax = std::max(ymax, y);
                    }
            CHECK(xmin == 6);
            CHECK(ymin == 9);
            CHECK(xmax == 6 + side - 1);
            CHECK(ymax == 9 + side - 1);
        }
    }
}

TEST_CASE("signs and distractors are pixel-identical up to pole and mount") {
    SceneSpec sign_spec;
    sign_spec.pole_rate = 0.0;
    sign_spec.clutter = 0.0;
    sign_spec.seed = 13;
    SceneSpec distractor_spec = sign_spec;
    distractor_spec.min_signs = distractor_spec.max_signs = 0;
    distractor_spec.min_distractors = distractor_spec.max_distractors = 1;
    distractor_spec.distractor_mount = false;
    for (std::uint64_t k = 0; k < 20; ++k) {
        auto a = generate_scene(sign_spec, k);
        auto b = generate_scene(distractor_spec, k);
        REQUIRE(a.objects.size() == 1);
        REQUIRE(b.distractors.size() == 1);
        CHECK(a.objects[0].cls == b.distractors[0].cls);
        CHECK(a.objects[0].box.xmin == b.distractors[0].box.xmin);
        CHECK(a.objects[0].box.ymax == b.distractors[0].box.ymax);
        CHECK(same_pixels(a.image, b.image));  // same renderer, same bytes
    }
}

TEST_CASE("distractor_pole puts the extra pixels strictly below the glyph") {
    SceneSpec spec;
    spec.min_signs = spec.max_signs = 0;
    spec.min_distractors = spec.max_distractors = 1;
    spec.distractor_mount = false;
    spec.clutter = 0.0;
    spec.seed = 23;
    SceneSpec with_pole = spec;
    with_pole.distractor_pole = true;
    for (std::uint64_t k = 0; k < 20; ++k) {
        auto a = generate_scene(with_pole, k);
        auto b = generate_scene(spec, k);
        REQUIRE(a.distractors.size() == 1);
        const auto& box = a.distractors[0].box;
        bool any = false;
        for (int y = 0; y < a.image.h; ++y)
            for (int x = 0; x < a.image.w; ++x)
                for (int c = 0; c < 3; ++c)
                    if (a.image.at(x, y, c) != b.image.at(x, y, c)) {
                        any = true;
                        CHECK(y >= static_cast<int>(box.ymax));  // pole only
                    }
        CHECK(any);
    }
}

TEST_CASE("distractor mounts hang strictly above the glyph") {
    SceneSpec spec;
    spec.min_signs = spec.max_signs = 0;
    spec.min_distractors = spec.max_distractors = 1;
    spec.clutter = 0.0;
    spec.seed = 17;
    SceneSpec bare = spec;
    bare.distractor_mount = false;
    for (std::uint64_t k = 0; k < 20; ++k) {
        auto a = generate_scene(spec, k);
        auto b = generate_scene(bare, k);
        REQUIRE(a.distractors.size() == 1);
        const auto& box = a.distractors[0].box;
        bool any = false;
        for (int y = 0; y < a.image.h; ++y)
            for (int x = 0; x < a.image.w; ++x)
                for (int c = 0; c < 3; ++c)
                    if (a.image.at(x, y, c) != b.image.at(x, y, c)) {
                        any = true;
                        CHECK(y < static_cast<int>(box.ymin));  // strictly above
                    }
        CHECK(any);
    }
}

TEST_CASE("ppm round trip is bit exact and follows the P6 byte layout") {
    TmpDir tmp("ppm");
    Image8 im;
    im.w = 2;
    im.h = 1;
    im.rgb = {255, 0, 0, 0, 0, 255};  // red, blue
    write_ppm(tmp.path / "t.ppm", im);

    std::ifstream is(tmp.path / "t.ppm", std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::string body = all.substr(all.size() - 6);
    CHECK(body == std::string("\xFF\x00\x00\x00\x00\xFF", 6));
    CHECK(all.substr(0, 2) == "P6");

    auto back = read_ppm(tmp.path / "t.ppm");
    CHECK(same_pixels(im, back));

    Rng rng(19);
    Image8 big = Image8::blank(33, 21, 0, 0, 0);
    for (auto& v : big.rgb) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    write_ppm(tmp.path / "big.ppm", big);
    CHECK(same_pixels(big, read_ppm(tmp.path / "big.ppm")));
}

TEST_CASE("ppm reader rejects the ASCII variant and malformed files") {
    TmpDir tmp("ppmbad");
    auto write_file = [&](const std::string& name, const std::string& bytes) {
        std::ofstream os(tmp.path / name, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    write_file("p3.ppm", "P3\n2 1\n255\n255 0 0 0 0 255\n");
    CHECK_THROWS_WITH_AS(read_ppm(tmp.path / "p3.ppm"), doctest::Contains("P3"), FormatError);
    write_file("junk.ppm", "hello world");
    CHECK_THROWS_AS(read_ppm(tmp.path / "junk.ppm"), FormatError);
    write_file("maxval.ppm", "P6\n2 1\n65535\n abcdef");
    CHECK_THROWS_WITH_AS(read_ppm(tmp.path / "maxval.ppm"), doctest::Contains("maxval"), FormatError);
    write_file("short.ppm", "P6\n4 4\n255\nab");
    CHECK_THROWS_WITH_AS(read_ppm(tmp.path / "short.ppm"), doctest::Contains("truncated"), FormatError);
    CHECK_THROWS_AS(read_ppm(tmp.path / "missing.ppm"), FormatError);
}

TEST_CASE("annotation parsing: happy path, comments, and line-numbered errors") {
    TmpDir tmp("anno");
    {
        std::ofstream os(tmp.path / "a.txt");
        os << "# header comment\n";
        os << "img1.ppm 2 10 12 40 44\n";
        os << "\n";
        os << "img2.ppm 1 0.5 1.5 20.25 30.75  # trailing comment\n";
    }
    auto list = read_annotations(tmp.path / "a.txt");
    REQUIRE(list.size() == 2);
    CHECK(list[0].image == "img1.ppm");
    CHECK(list[0].cls == 2);
    CHECK(list[0].xmax == 40.0);
    CHECK(list[1].xmin == 0.5);

    {
        std::ofstream os(tmp.path / "bad.txt");
        os << "ok.ppm 1 0 0 5 5\n";
        os << "ok.ppm 1 0 0 5 5\n";
        os << "bad.ppm 1 9 0 5 5\n";  // xmax <= xmin
    }
    CHECK_THROWS_WITH_AS(read_annotations(tmp.path / "bad.txt"), doctest::Contains("line 3"), FormatError);

    {
        std::ofstream os(tmp.path / "short.txt");
        os << "img.ppm 1 2 3\n";
    }
    CHECK_THROWS_WITH_AS(read_annotations(tmp.path / "short.txt"), doctest::Contains("line 1"), FormatError);

    {
        std::ofstream os(tmp.path / "comments.txt");
        os << "# nothing\n#else\n\n";
    }
    CHECK(read_annotations(tmp.path / "comments.txt").empty());
}

TEST_CASE("a thousand random annotations round trip exactly") {
    TmpDir tmp("annort");
    Rng rng(23);
    std::vector<Annotation> list;
    for (int i = 0; i < 1000; ++i) {
        Annotation a;
        a.image = "images/img_" + std::to_string(i) + ".ppm";
        a.cls = static_cast<int>(rng.uniform_int(1, 9));
        a.xmin = rng.uniform(0, 500);
        a.ymin = rng.uniform(0, 500);
        a.xmax = a.xmin + rng.uniform(1e-3, 300);
        a.ymax = a.ymin + rng.uniform(1e-3, 300);
        list.push_back(std::move(a));
    }
    write_annotations(tmp.path / "rt.txt", list);
    auto back = read_annotations(tmp.path / "rt.txt");
    REQUIRE(back.size() == list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
        CHECK(back[i].image == list[i].image);
        CHECK(back[i].cls == list[i].cls);
        CHECK(back[i].xmin == list[i].xmin);  // exact, not approximate
        CHECK(back[i].ymin == list[i].ymin);
        CHECK(back[i].xmax == list[i].xmax);
        CHECK(back[i].ymax == list[i].ymax);
    }
}

TEST_CASE("dataset directory: counts, determinism, and reload") {
    TmpDir a("gen_a"), b("gen_b");
    SceneSpec spec;
    spec.seed = 29;
    auto rep = generate_dataset(a.path, spec, 8, 4);
    CHECK(rep.images == 12);
    CHECK(rep.objects == 8 + 4);  // one sign per image by default
    CHECK(rep.placement_failures == 0);

    int ppm_count = 0;
    for (const auto& e : fs::directory_iterator(a.path / "images"))
        if (e.path().extension() == ".ppm") ++ppm_count;
    CHECK(ppm_count == 12);
    CHECK(count_lines(a.path / "train.txt") == 8);
    CHECK(count_lines(a.path / "test.txt") == 4);

    generate_dataset(b.path, spec, 8, 4);
    CHECK(same_pixels(read_ppm(a.path / "images/train_00003.ppm"), read_ppm(b.path / "images/train_00003.ppm")));
    std::ifstream fa(a.path / "train.txt"), fb(b.path / "train.txt");
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);

    auto entries = load_split(a.path, "train");
    REQUIRE(entries.size() == 8);
    CHECK(entries[0].image_path == "images/train_00000.ppm");
    for (const auto& e : entries) {
        REQUIRE(e.gts.size() == 1);
        CHECK(e.gts[0].cls >= 1);
        CHECK(fs::exists(a.path / e.image_path));
    }

    // Train and test draw from disjoint per-sample streams: the first test
    // image must differ from the first train image.
    CHECK(!same_pixels(read_ppm(a.path / "images/train_00000.ppm"), read_ppm(a.path / "images/test_00000.ppm")));
}

TEST_CASE("nearest-neighbor resize duplicates pixels at integer upscales") {
    Image8 im;
    im.w = 2;
    im.h = 2;
    im.rgb = {10, 0, 0, 20, 0, 0, 30, 0, 0, 40, 0, 0};
    auto up = resize_nearest(im, 4, 4);
    CHECK(up.at(0, 0, 0) == 10);
    CHECK(up.at(1, 1, 0) == 10);
    CHECK(up.at(2, 0, 0) == 20);
    CHECK(up.at(3, 3, 0) == 40);
    auto same = resize_nearest(im, 2, 2);
    CHECK(same.rgb == im.rgb);
    CHECK_THROWS_AS(resize_nearest(im, 0, 4), std::invalid_argument);
}
