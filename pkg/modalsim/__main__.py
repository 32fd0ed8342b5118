import fire

from modalsim.app import App


def main():
    fire.Fire(App)


if __name__ == "__main__":
    main()
