#include <filesystem>

#include "doctest.h"
#include "panfpn/panoptic_io.hpp"
#include "panfpn/reference.hpp"

using namespace panfpn;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("png id round trip, including ids near the encoding limit") {
    std::vector<uint32_t> ids = {0, 1, 255, 256, 65535, 65536, 16777215, 42, 12345678};
    const std::string png = encode_id_png(ids, 3, 3);
    int h = 0, w = 0;
    auto back = decode_id_png(png, h, w);
    CHECK(h == 3);
    CHECK(w == 3);
    CHECK(back == ids);
}

TEST_CASE("png encoding is byte-deterministic") {
    Rng rng(1);
    std::vector<uint32_t> ids(64 * 48);
    for (auto& id : ids) id = static_cast<uint32_t>(rng.next_below(1000));
    CHECK(encode_id_png(ids, 48, 64) == encode_id_png(ids, 48, 64));
}

TEST_CASE("png channel packing: id = R + 256 G + 65536 B") {
    // a single pixel with id 0x030201 must decompress to bytes 01 02 03
    const std::string png = encode_id_png({0x030201u}, 1, 1);
    // locate the IDAT payload and inflate it by decoding and re-checking the id
    int h = 0, w = 0;
    auto ids = decode_id_png(png, h, w);
    CHECK(ids[0] == 0x030201u);
    // and structurally: PNG signature + IHDR as 8-bit RGB
    CHECK(png.substr(1, 3) == "PNG");
    const auto* p = reinterpret_cast<const unsigned char*>(png.data());
    CHECK(p[8 + 4 + 4 + 8] == 8);  // bit depth byte inside IHDR
    CHECK(p[8 + 4 + 4 + 9] == 2);  // color type RGB
}

TEST_CASE("png rejects oversized ids") {
    CHECK_THROWS_AS(encode_id_png({256u * 256u * 256u}, 1, 1), ValidationError);
    CHECK_NOTHROW(encode_id_png({256u * 256u * 256u - 1}, 1, 1));
}

TEST_CASE("png decoder handles all five scanline filters") {
    // hand-assemble a 2x2 RGB PNG per row filter; values chosen so every filter
    // branch reconstructs distinct bytes
    auto build = [](int filter_row0, int filter_row1, const std::vector<uint8_t>& filtered) {
        std::string raw;
        raw.push_back(static_cast<char>(filter_row0));
        for (int i = 0; i < 6; ++i) raw.push_back(static_cast<char>(filtered[i]));
        raw.push_back(static_cast<char>(filter_row1));
        for (int i = 6; i < 12; ++i) raw.push_back(static_cast<char>(filtered[i]));
        std::string png("\x89PNG\r\n\x1a\n", 8);
        std::string ihdr;
        pngio::put_u32be(ihdr, 2);
        pngio::put_u32be(ihdr, 2);
        ihdr += std::string("\x08\x02\x00\x00\x00", 5);
        pngio::write_chunk(png, "IHDR", ihdr);
        pngio::write_chunk(png, "IDAT", pngio::zlib_deflate(raw));
        pngio::write_chunk(png, "IEND", "");
        return png;
    };

    // filter 1 (sub): row [10,0,0, 5,0,0] stored as [10,0,0, -5... ] -> deltas
    {
        auto png = build(1, 2, {10, 0, 0, 246, 0, 0,  // row0: 10, then 10-10=0? sub: x + a
                                5, 0, 0, 0, 0, 0});   // row1 filter 2 (up): adds row0
        int h, w;
        auto ids = decode_id_png(png, h, w);
        // row0: [10, 10+246=0, ...] bytes: px0=(10,0,0)=10, px1=((10+246)&255,0,0)=(0,0,0)
        CHECK(ids[0] == 10);
        CHECK(ids[1] == 0);
        // row1 (up): px0 = 10+5=15, px1 = 0+0=0
        CHECK(ids[2] == 15);
        CHECK(ids[3] == 0);
    }
    // filter 3 (average) and 4 (paeth)
    {
        auto png = build(3, 4, {20, 0, 0, 30, 0, 0,  // avg: a/2 carried forward
                                1, 0, 0, 1, 0, 0});
        int h, w;
        auto ids = decode_id_png(png, h, w);
        // row0 avg: px0 = 20 + 0/2 = 20; px1 = 30 + 20/2 = 40
        CHECK(ids[0] == 20);
        CHECK(ids[1] == 40);
        // row1 paeth: px0 predictor = b = 20 -> 21; px1: a=21,b=40,c=20, p=41 ->
        // pa=20,pb=1,pc=21 -> b wins -> 41
        CHECK(ids[2] == 21);
        CHECK(ids[3] == 41);
    }
}

TEST_CASE("png decoder rejects malformed input") {
    int h, w;
    CHECK_THROWS_AS(decode_id_png("not a png", h, w), FormatError);
    std::string png = encode_id_png({1, 2, 3, 4}, 2, 2);
    png.resize(png.size() - 6);
    CHECK_THROWS_AS(decode_id_png(png, h, w), FormatError);
    std::string corrupt = encode_id_png({1, 2, 3, 4}, 2, 2);
    corrupt[40] ^= 0x5a;  // inside IDAT
    CHECK_THROWS_AS(decode_id_png(corrupt, h, w), FormatError);
}

TEST_CASE("random id maps survive the png round trip exactly") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const int h = 1 + static_cast<int>(rng.next_below(40));
        const int w = 1 + static_cast<int>(rng.next_below(40));
        std::vector<uint32_t> ids(static_cast<size_t>(h) * w);
        for (auto& id : ids) id = static_cast<uint32_t>(rng.next_below(1u << 24));
        int h2, w2;
        auto back = decode_id_png(encode_id_png(ids, h, w), h2, w2);
        REQUIRE(h2 == h);
        REQUIRE(w2 == w);
        REQUIRE(back == ids);
    }
}

TEST_CASE("dataset json round trip") {
    TmpDir dir("panfpn_io_json");
    PanopticDataset ds;
    ds.images.push_back({7, "a.png", 32, 16});
    ds.categories.push_back({1, "grass", false});
    ds.categories.push_back({100, "cat", true});
    AnnotationRecord ann;
    ann.image_id = 7;
    ann.file_name = "a.png";
    ann.segments_info.push_back({1, 100, 50, false});
    ann.segments_info.push_back({2, 1, 462, true});
    ds.annotations.push_back(ann);
    save_dataset_json(dir.file("ds.json"), ds);
    PanopticDataset back = load_dataset_json(dir.file("ds.json"));
    REQUIRE(back.images.size() == 1);
    CHECK(back.images[0].id == 7);
    CHECK(back.images[0].width == 32);
    REQUIRE(back.annotations.size() == 1);
    CHECK(back.annotations[0].segments_info.size() == 2);
    CHECK(back.annotations[0].segments_info[1].iscrowd);
    auto table = back.category_table();
    CHECK(table.at(1) == false);
    CHECK(table.at(100) == true);
}

TEST_CASE("dataset json rejects malformed and mis-shaped input") {
    CHECK_THROWS_AS(parse_dataset_json("{not json", "test"), FormatError);
    CHECK_THROWS_AS(parse_dataset_json(R"({"annotations":[{"image_id":1}]})", "test"), FormatError);
    // missing sections are tolerated as empty
    auto ds = parse_dataset_json("{}", "test");
    CHECK(ds.images.empty());
}

TEST_CASE("load_panoptic_png validates segments against pixels") {
    TmpDir dir("panfpn_io_png");
    PanopticMap map(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) map.at(y, x) = x < 4 ? 1 : 2;
    write_file(dir.file("m.png"), encode_id_png(map.id_map, 8, 8));
    CategoryTable cats{{10, false}, {20, true}};

    AnnotationRecord ann;
    ann.image_id = 1;
    ann.file_name = "m.png";
    ann.segments_info = {{1, 10, 32, false}, {2, 20, 32, false}};
    PanopticMap loaded = load_panoptic_png(dir.file("m.png"), ann, cats);
    CHECK(loaded.segments.at(1).category == 10);
    CHECK(loaded.segments.at(2).is_thing);
    CHECK(loaded.segments.at(2).area == 32);

    // declared area disagrees
    ann.segments_info[0].area = 31;
    CHECK_THROWS_AS(load_panoptic_png(dir.file("m.png"), ann, cats), ValidationError);
    PanopticMap repaired = load_panoptic_png(dir.file("m.png"), ann, cats, true);
    CHECK(repaired.segments.at(1).area == 32);
    ann.segments_info[0].area = 32;

    // JSON segment missing from PNG
    ann.segments_info.push_back({9, 10, 5, false});
    CHECK_THROWS_AS(load_panoptic_png(dir.file("m.png"), ann, cats), ValidationError);
    ann.segments_info.pop_back();

    // PNG id missing from JSON
    ann.segments_info.pop_back();
    CHECK_THROWS_AS(load_panoptic_png(dir.file("m.png"), ann, cats), ValidationError);

    // unknown category
    ann.segments_info = {{1, 10, 32, false}, {2, 99, 32, false}};
    CHECK_THROWS_AS(load_panoptic_png(dir.file("m.png"), ann, cats), ValidationError);
}

TEST_CASE("append_panoptic_result then DatasetLoader round trip") {
    TmpDir dir("panfpn_io_loader");
    PanopticDataset ds;
    ds.categories.push_back({3, "sky", false});
    ds.categories.push_back({50, "dog", true});

    Rng rng(5);
    PanopticMap map(10, 12);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 12; ++x) map.at(y, x) = x < 6 ? 1 : 2;
    map.segments[1] = {50, true, 60, false};
    map.segments[2] = {3, false, 60, false};
    append_panoptic_result(ds, dir.path.string(), 42, "img42.png", map);
    save_dataset_json(dir.file("ds.json"), ds);

    DatasetLoader loader(dir.file("ds.json"), dir.path.string());
    REQUIRE(loader.size() == 1);
    auto [loaded, ann] = loader.load(0);
    CHECK(ann->image_id == 42);
    CHECK(loaded.id_map == map.id_map);
    CHECK(loaded.segments.at(1).category == 50);
    CHECK(loaded.segments.at(2).area == 60);
}

TEST_CASE("rle alternating runs start with zeros") {
    CHECK(rle_encode({0, 0, 1, 1, 1, 0}) == std::vector<uint32_t>{2, 3, 1});
    CHECK(rle_encode({1, 1, 0}) == std::vector<uint32_t>{0, 2, 1});
    CHECK(rle_encode({0, 0, 0}) == std::vector<uint32_t>{3});
    CHECK(rle_decode({2, 3, 1}, 6) == std::vector<uint8_t>{0, 0, 1, 1, 1, 0});
    CHECK_THROWS_AS(rle_decode({2, 3}, 6), FormatError);
}

TEST_CASE("rle round trips random masks") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        std::vector<uint8_t> mask(1 + rng.next_below(500));
        for (auto& v : mask) v = rng.next_below(2) ? 1 : 0;
        CHECK(rle_decode(rle_encode(mask), mask.size()) == mask);
    }
}

TEST_CASE("instances jsonl round trip") {
    TmpDir dir("panfpn_io_jsonl");
    Rng rng(6);
    auto instances = reference::random_instances(rng, 9, 11, 5);
    save_instances_jsonl(dir.file("inst.jsonl"), instances, 9, 11);
    auto back = load_instances_jsonl(dir.file("inst.jsonl"), 9, 11);
    REQUIRE(back.size() == instances.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].category == instances[i].category);
        CHECK(back[i].score == doctest::Approx(instances[i].score).epsilon(1e-12));
        CHECK(back[i].mask == instances[i].mask);
    }
}

TEST_CASE("instances jsonl rejects wrong sizes and bad lines") {
    TmpDir dir("panfpn_io_jsonl_bad");
    write_file(dir.file("a.jsonl"),
               R"({"category":1,"score":0.5,"size":[4,4],"counts":[16]})" "\n");
    CHECK_NOTHROW(load_instances_jsonl(dir.file("a.jsonl"), 4, 4));
    CHECK_THROWS_AS(load_instances_jsonl(dir.file("a.jsonl"), 4, 5), FormatError);
    write_file(dir.file("b.jsonl"), "{broken\n");
    CHECK_THROWS_AS(load_instances_jsonl(dir.file("b.jsonl"), 4, 4), FormatError);
    write_file(dir.file("c.jsonl"),
               R"({"category":1,"score":0.5,"size":[4,4],"counts":[15]})" "\n");
    CHECK_THROWS_AS(load_instances_jsonl(dir.file("c.jsonl"), 4, 4), FormatError);
    CHECK_THROWS_AS(load_instances_jsonl(dir.file("missing.jsonl"), 4, 4), IoError);
}
