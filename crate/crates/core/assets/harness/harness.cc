#include <cstdio>
#include <cstring>

bool validate();
void benchmark();

int main(int argc, char** argv) {
    const char* mode = argc > 1 ? argv[1] : "validate";
    if (std::strcmp(mode, "benchmark") == 0) {
        benchmark();
        std::printf("BENCHMARK: DONE\n");
        return 0;
    }
    bool ok = validate();
    std::printf("VALIDATION: %s\n", ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}
